// Copyright (C) 2026 The lora-dyn authors
// SPDX-License-Identifier: Apache-2.0

// Run directories, manifests, and CSV/JSON output.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include <json.hpp>
#include <openssl/evp.h>

#include "lora_dyn/dynamics.hpp"
#include "lora_dyn/errors.hpp"

namespace lora_dyn {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// Shortest text that reads back as the same double (%.17g).
inline std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw NumericalError("sha256: digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("cannot read '" + p.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& p, const std::string& bytes) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + p.string() + "'");
  out << bytes;
  if (!out) throw ConfigError("short write to '" + p.string() + "'");
}

/// Canonical JSON text: sorted keys, two-space indent, trailing newline.
inline std::string canonical_json(const json& j) { return j.dump(2) + "\n"; }

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

/// Simple RFC-4180 writer (CRLF line ends).
class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header) : cols_(header.size()) { row(header); }
  void row(const std::vector<std::string>& cells) {
    if (cells.size() != cols_) throw ConfigError("csv: row width mismatch");
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) text_ += ',';
      text_ += csv_escape(cells[i]);
    }
    text_ += "\r\n";
  }
  const std::string& str() const { return text_; }

 private:
  std::size_t cols_;
  std::string text_;
};

inline std::string trajectory_csv(const TrajectoryRecord& rec) {
  CsvWriter w({"run_id", "t", "m_t", "c_overlap", "loss_sample", "grad_norm", "pi_t"});
  for (const TrajectoryRow& r : rec.rows) {
    w.row({rec.run_id, std::to_string(r.t), fmt_double(r.m), fmt_double(r.c_overlap), fmt_double(r.loss_sample),
           fmt_double(r.grad_norm), fmt_double(r.pi)});
  }
  return w.str();
}

/// Held-out loss at the logged steps (only when eval_samples > 0).
inline std::string eval_loss_csv(const TrajectoryRecord& rec) {
  CsvWriter w({"run_id", "t", "eval_loss"});
  for (const TrajectoryRow& r : rec.rows) w.row({rec.run_id, std::to_string(r.t), fmt_double(r.eval_loss)});
  return w.str();
}

inline json stopping_time_json(std::int64_t t) { return t == kNever ? json(nullptr) : json(t); }

inline json trajectory_summary(const TrajectoryRecord& rec) {
  double final_eval = std::numeric_limits<double>::quiet_NaN();
  double min_eval = std::numeric_limits<double>::infinity();
  for (const TrajectoryRow& r : rec.rows) {
    if (std::isnan(r.eval_loss)) continue;
    final_eval = r.eval_loss;
    min_eval = std::min(min_eval, r.eval_loss);
  }
  const bool has_eval = !std::isnan(final_eval);
  return {{"run_id", rec.run_id},
          {"final_eval_loss", has_eval ? json(final_eval) : json(nullptr)},
          {"min_eval_loss", has_eval ? json(min_eval) : json(nullptr)},
          {"seed", rec.config.seed},
          {"mode", to_string(rec.config.mode)},
          {"eta", rec.config.eta},
          {"T", rec.config.T},
          {"epsilon", rec.config.epsilon},
          {"m0", rec.m0},
          {"h0", rec.h0},
          {"restarted", rec.restarted},
          {"final_m", rec.final_m},
          {"final_m2", rec.final_m * rec.final_m},
          {"final_c_overlap", rec.final_c_overlap},
          {"tau_weak", stopping_time_json(rec.tau_weak)},
          {"tau_strong", stopping_time_json(rec.tau_strong)},
          {"weak_threshold", rec.config.weak_threshold},
          {"strong_threshold", 1.0 - rec.config.epsilon / 6.0},
          {"min_pi", rec.min_pi},
          {"max_span_leak", rec.max_span_leak}};
}

// ---- run directories and manifests ----

inline constexpr const char* kManifest = "manifest.json";
inline constexpr const char* kTiming = "timing.json";

/// Files covered by the manifest: everything except the manifest itself and
/// timing.json (wall-clock data is not reproducible).
inline std::vector<std::string> manifest_files(const fs::path& dir) {
  std::vector<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), dir).generic_string();
    if (rel == kManifest || rel == kTiming) continue;
    out.push_back(rel);
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline json build_manifest(const fs::path& dir, const std::vector<std::string>& streams) {
  json files = json::object();
  for (const std::string& rel : manifest_files(dir)) files[rel] = sha256_hex(read_file(dir / rel));
  return {{"algorithm", "sha256"}, {"files", files}, {"rng_streams", streams}};
}

struct VerifyResult {
  bool ok = true;
  std::vector<std::string> problems;
};

/// Recomputes every digest and checks the file set matches.
inline VerifyResult verify_manifest(const fs::path& dir) {
  VerifyResult r;
  json m;
  try {
    m = json::parse(read_file(dir / kManifest));
  } catch (const json::exception& e) {
    return {false, {std::string("manifest unreadable: ") + e.what()}};
  }
  const json& files = m.at("files");
  for (auto it = files.begin(); it != files.end(); ++it) {
    const fs::path p = dir / it.key();
    if (!fs::exists(p)) {
      r.problems.push_back("missing: " + it.key());
    } else if (sha256_hex(read_file(p)) != it.value().get<std::string>()) {
      r.problems.push_back("digest mismatch: " + it.key());
    }
  }
  for (const std::string& rel : manifest_files(dir)) {
    if (!files.contains(rel)) r.problems.push_back("not in manifest: " + rel);
  }
  r.ok = r.problems.empty();
  return r;
}

/// A run directory written under a hidden staging name and renamed into
/// place on commit; on abort the staging directory moves under failed/.
class RunDirectory {
 public:
  RunDirectory(const fs::path& root, const std::string& name) : root_(root) {
    fs::create_directories(root_);
    final_ = root_ / name;
    for (int n = 1; fs::exists(final_); ++n) final_ = root_ / (name + "-" + std::to_string(n));
    staging_ = root_ / ("." + final_.filename().string() + ".partial");
    fs::remove_all(staging_);
    fs::create_directories(staging_);
  }
  RunDirectory(const RunDirectory&) = delete;
  RunDirectory& operator=(const RunDirectory&) = delete;
  ~RunDirectory() {
    if (!done_) abort();
  }

  const fs::path& path() const { return staging_; }
  const fs::path& final_path() const { return final_; }

  void write(const std::string& rel, const std::string& bytes) { write_file(staging_ / rel, bytes); }
  void write_json(const std::string& rel, const json& j) { write(rel, canonical_json(j)); }

  /// Writes the manifest, verifies it, and renames into place.
  fs::path commit(const std::vector<std::string>& streams, const json& timing) {
    write_json(kManifest, build_manifest(staging_, streams));
    write_json(kTiming, timing);
    const VerifyResult v = verify_manifest(staging_);
    if (!v.ok) throw CheckFailure("manifest verification failed after write: " + v.problems.front());
    fs::rename(staging_, final_);
    done_ = true;
    return final_;
  }

  void abort() noexcept {
    done_ = true;
    std::error_code ec;
    const fs::path failed = root_ / "failed";
    fs::create_directories(failed, ec);
    fs::path dst = failed / final_.filename();
    for (int n = 1; fs::exists(dst, ec); ++n) dst = failed / (final_.filename().string() + "-" + std::to_string(n));
    fs::rename(staging_, dst, ec);
  }

 private:
  fs::path root_;
  fs::path final_;
  fs::path staging_;
  bool done_ = false;
};

}  // namespace lora_dyn
