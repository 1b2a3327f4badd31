#pragma once

// JSON-lines files:
//   sets:   {"t": null | number, "points": [[x, y], ...], "label": k (optional)}
//   series: {"times": [...], "sets": [[[x, y], ...], ...]}

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "exnode/layers.hpp"
#include "exnode/synth.hpp"

namespace exnode::io {

using Json = nlohmann::json;
using synth::DataError;

/// One set as read from or written to a sets file.
struct SetRecord {
  std::optional<double> t;
  DenseArray points;  // (n, d)
  std::optional<int> label;
};

inline Json points_json(const double* p, std::size_t n, std::size_t d) {
  Json pts = Json::array();
  for (std::size_t i = 0; i < n; ++i) pts.push_back(std::vector<double>(p + i * d, p + (i + 1) * d));
  return pts;
}

inline DenseArray points_from_json(const Json& j, const std::string& where) {
  if (!j.is_array() || j.empty()) throw DataError(where + ": points must be a non-empty array");
  const std::size_t n = j.size();
  if (!j[0].is_array() || j[0].empty()) throw DataError(where + ": each point must be a non-empty array");
  const std::size_t d = j[0].size();
  DenseArray out(Shape{n, d});
  for (std::size_t i = 0; i < n; ++i) {
    if (!j[i].is_array() || j[i].size() != d) throw DataError(where + ": point " + std::to_string(i) + " has wrong width");
    for (std::size_t k = 0; k < d; ++k) {
      if (!j[i][k].is_number()) throw DataError(where + ": non-numeric coordinate");
      out[i * d + k] = j[i][k].get<double>();
    }
  }
  return out;
}

template <class F>
void for_each_line(const std::string& path, F f) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read " + path);
  std::string line;
  std::size_t no = 0;
  while (std::getline(is, line)) {
    ++no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::exception& e) {
      throw DataError(path + ":" + std::to_string(no) + ": " + e.what());
    }
    f(j, path + ":" + std::to_string(no));
  }
}

inline std::vector<SetRecord> read_sets(const std::string& path) {
  std::vector<SetRecord> out;
  for_each_line(path, [&](const Json& j, const std::string& where) {
    if (!j.is_object() || !j.contains("points")) throw DataError(where + ": expected an object with \"points\"");
    SetRecord r;
    r.points = points_from_json(j["points"], where);
    if (j.contains("t") && !j["t"].is_null()) r.t = j["t"].get<double>();
    if (j.contains("label")) {
      if (!j["label"].is_number_integer()) throw DataError(where + ": label must be an integer");
      r.label = j["label"].get<int>();
    }
    out.push_back(std::move(r));
  });
  if (out.empty()) throw DataError(path + " holds no sets");
  return out;
}

inline std::string set_line(const double* p, std::size_t n, std::size_t d, std::optional<double> t = std::nullopt,
                            std::optional<int> label = std::nullopt) {
  Json j;
  j["t"] = t ? Json(*t) : Json(nullptr);
  j["points"] = points_json(p, n, d);
  if (label) j["label"] = *label;
  return j.dump();
}

inline void write_sets(const std::string& path, const SetBatch& sets, const std::vector<int>* labels = nullptr) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path);
  const std::size_t w = sets.n() * sets.d();
  for (std::size_t b = 0; b < sets.batch(); ++b)
    os << set_line(sets.values().data() + b * w, sets.n(), sets.d(), std::nullopt,
                   labels ? std::optional<int>((*labels)[b]) : std::nullopt)
       << '\n';
}

/// Groups records with equal (n, d) into batches, keeping first-seen order of
/// shapes; `index[k]` maps batch rows back to record positions.
struct Grouped {
  std::vector<SetBatch> batches;
  std::vector<std::vector<std::size_t>> index;
};

inline Grouped group_by_shape(const std::vector<SetRecord>& recs) {
  Grouped g;
  std::vector<Shape> shapes;
  std::vector<std::vector<double>> data;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const Shape& s = recs[i].points.shape();
    std::size_t k = 0;
    while (k < shapes.size() && shapes[k] != s) ++k;
    if (k == shapes.size()) {
      shapes.push_back(s);
      data.emplace_back();
      g.index.emplace_back();
    }
    data[k].insert(data[k].end(), recs[i].points.values().begin(), recs[i].points.values().end());
    g.index[k].push_back(i);
  }
  for (std::size_t k = 0; k < shapes.size(); ++k)
    g.batches.emplace_back(g.index[k].size(), shapes[k][0], shapes[k][1], std::move(data[k]));
  return g;
}

/// All sets must share (n, d).
inline SetBatch to_batch(const std::vector<SetRecord>& recs) {
  Grouped g = group_by_shape(recs);
  if (g.batches.size() != 1) throw DataError("sets differ in size; expected one shape");
  return g.batches[0];
}

inline LabeledSets to_labeled(const std::vector<SetRecord>& recs) {
  LabeledSets out{to_batch(recs), {}};
  for (const auto& r : recs) {
    if (!r.label) throw DataError("classification data needs a \"label\" on every set");
    out.labels.push_back(*r.label);
  }
  return out;
}

// ---- series ----------------------------------------------------------------------

inline std::vector<synth::TemporalSeries> read_series(const std::string& path) {
  std::vector<synth::TemporalSeries> out;
  for_each_line(path, [&](const Json& j, const std::string& where) {
    if (!j.is_object() || !j.contains("times") || !j.contains("sets"))
      throw DataError(where + ": expected an object with \"times\" and \"sets\"");
    synth::TemporalSeries s;
    s.times = j["times"].get<std::vector<double>>();
    for (const auto& x : j["sets"]) s.sets.push_back(points_from_json(x, where));
    if (s.times.size() != s.sets.size()) throw DataError(where + ": times and sets differ in length");
    out.push_back(std::move(s));
  });
  if (out.empty()) throw DataError(path + " holds no series");
  return out;
}

inline std::string series_line(const synth::TemporalSeries& s) {
  Json sets = Json::array();
  for (const auto& x : s.sets) sets.push_back(points_json(x.data(), x.dim(0), x.dim(1)));
  return Json{{"times", s.times}, {"sets", sets}}.dump();
}

inline void write_series(const std::string& path, const std::vector<synth::TemporalSeries>& series) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path);
  for (const auto& s : series) os << series_line(s) << '\n';
}

}  // namespace exnode::io
