#pragma once

// Output helpers: CSV tables, JSON documents and the run manifest.
// All numeric output is written with fmt17 so repeated runs are byte-equal.

#include "wavetrace/core.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace wavetrace {

using json = nlohmann::json;

/// @brief Simple CSV writer with deterministic 17-digit formatting.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header)
      : out_(path) {
    if (!out_) throw std::runtime_error("cannot open " + path.string());
    for (std::size_t i = 0; i < header.size(); ++i)
      out_ << (i ? "," : "") << header[i];
    out_ << "\n";
    ncol_ = header.size();
  }
  void row(const std::vector<double>& vals) {
    if (vals.size() != ncol_) throw std::runtime_error("csv row width mismatch");
    for (std::size_t i = 0; i < vals.size(); ++i)
      out_ << (i ? "," : "") << fmt17(vals[i]);
    out_ << "\n";
  }
  void row_mixed(const std::vector<std::string>& cells) {
    if (cells.size() != ncol_) throw std::runtime_error("csv row width mismatch");
    for (std::size_t i = 0; i < cells.size(); ++i)
      out_ << (i ? "," : "") << cells[i];
    out_ << "\n";
  }

 private:
  std::ofstream out_;
  std::size_t ncol_ = 0;
};

inline void write_json(const std::filesystem::path& path, const json& doc) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  out << doc.dump(2) << "\n";
}

inline json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  json doc;
  in >> doc;
  return doc;
}

/// @brief Render a double for JSON as a 17-digit string (nlohmann emits
/// doubles with shortest round-trip representation, which is also
/// deterministic; strings are used where we need exact cross-run equality of
/// aggregated values).
inline json json_num(double x) { return fmt17(x); }

/// @brief Run manifest: inputs, code version, model hash — deterministic;
/// wall-clock timings live in the separate "timing" object so consumers can
/// strip it before byte comparison.
struct Manifest {
  json inputs;       // resolved config
  json model;        // model descriptor + hash
  json outputs;      // file names produced
  json timing;       // wall times (non-deterministic, excluded from compare)
  std::string tool_version = "wavetrace 1.0.0";

  json to_json() const {
    json m;
    m["tool"] = tool_version;
    m["inputs"] = inputs;
    m["model"] = model;
    m["outputs"] = outputs;
    m["timing"] = timing;
    return m;
  }
  void write(const std::filesystem::path& dir) const {
    write_json(dir / "manifest.json", to_json());
  }
  /// @brief Manifest with the timing block removed, for determinism checks.
  static json stripped(json m) {
    m.erase("timing");
    return m;
  }
};

}  // namespace wavetrace
