// Canonical on-disk form of a codebook: the parameter header only
// (kind, D, B, size, seed). Vectors are regenerated, never stored.
#pragma once

#include <fstream>
#include <string>

#include "json.hpp"

#include "arlc/common.hpp"
#include "arlc/vsa.hpp"

namespace arlc::vsa {

inline nlohmann::ordered_json codebook_header(const Codebook& cb) {
  nlohmann::ordered_json j;
  j["kind"] = cb.kind == CodebookKind::Fpe ? "fpe" : "categorical";
  j["D"] = cb.dims.D;
  j["B"] = cb.dims.B;
  j["size"] = cb.size;
  j["seed"] = cb.seed;
  return j;
}

inline Codebook codebook_from_header(const nlohmann::ordered_json& j) {
  auto require = [&](const char* field) -> const nlohmann::ordered_json& {
    if (!j.contains(field))
      throw LoadError("codebook header missing field '" + std::string(field) + "'");
    return j.at(field);
  };
  std::string kind_s = require("kind").get<std::string>();
  CodebookKind kind;
  if (kind_s == "fpe")
    kind = CodebookKind::Fpe;
  else if (kind_s == "categorical")
    kind = CodebookKind::Categorical;
  else
    throw LoadError("codebook header field 'kind': unknown value '" + kind_s + "'");
  Dims dims{require("D").get<int>(), require("B").get<int>()};
  return new_codebook(require("seed").get<std::uint64_t>(),
                      require("size").get<int>(), kind, dims);
}

inline void save_codebook(const Codebook& cb, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open '" + path + "' for writing");
  out << codebook_header(cb).dump() << "\n";
}

inline Codebook load_codebook(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open codebook header '" + path + "'");
  nlohmann::ordered_json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw LoadError("codebook header parse failure: " + std::string(e.what()));
  }
  return codebook_from_header(j);
}

}  // namespace arlc::vsa
