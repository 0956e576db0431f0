// Copyright 2026 The rellax Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Named-tensor text checkpoints.
//
//   # rellax-checkpoint v1
//   meta <key> <value...>
//   tensor <name> <rows> <cols>
//   <cols values per line, 17 significant digits>
//   digest sha256 <hex>
//
// The digest covers the tensor blocks only (not meta lines), so it identifies
// the parameter values exactly and is what the freezing checks compare.

#include <openssl/evp.h>

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "rellax/error.hpp"
#include "rellax/numerics.hpp"

namespace rellax {

inline std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256: digest computation failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 0xf]);
  }
  return out;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

class Checkpoint {
 public:
  void add(const std::string& name, const Matrix& m) {
    RELLAX_REQUIRE(!index_.contains(name), "checkpoint: duplicate tensor " + name);
    index_[name] = tensors_.size();
    tensors_.push_back({name, m});
  }
  void add(const std::string& name, std::span<const double> v) {
    add(name, Matrix(1, v.size(), std::vector<double>(v.begin(), v.end())));
  }
  void add(const std::string& prefix, const Mlp2& m) {
    add(prefix + ".w1", m.w1);
    add(prefix + ".b1", m.b1);
    add(prefix + ".w2", m.w2);
    add(prefix + ".b2", m.b2);
  }
  void set_meta(const std::string& key, const std::string& value) { meta_[key] = value; }

  bool contains(const std::string& name) const { return index_.contains(name); }
  const Matrix& matrix(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw LoadError("checkpoint: missing tensor " + name);
    return tensors_[it->second].second;
  }
  Vector vector(const std::string& name) const {
    const Matrix& m = matrix(name);
    return Vector(m.values().begin(), m.values().end());
  }
  Mlp2 mlp2(const std::string& prefix) const {
    return Mlp2{matrix(prefix + ".w1"), vector(prefix + ".b1"), matrix(prefix + ".w2"),
                vector(prefix + ".b2")};
  }
  std::string meta(const std::string& key) const {
    auto it = meta_.find(key);
    return it == meta_.end() ? std::string{} : it->second;
  }
  const std::vector<std::pair<std::string, Matrix>>& tensors() const { return tensors_; }

  std::string tensor_text() const {
    std::string out;
    for (const auto& [name, m] : tensors_) {
      out += "tensor " + name + " " + std::to_string(m.rows()) + " " + std::to_string(m.cols()) + "\n";
      for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t c = 0; c < m.cols(); ++c) {
          if (c) out += ' ';
          out += format_double(m(r, c));
        }
        out += '\n';
      }
    }
    return out;
  }

  std::string digest() const { return sha256_hex(tensor_text()); }

  std::string to_string() const {
    std::string out = "# rellax-checkpoint v1\n";
    for (const auto& [k, v] : meta_) out += "meta " + k + " " + v + "\n";
    out += tensor_text();
    out += "digest sha256 " + digest() + "\n";
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("checkpoint: cannot write " + path);
    f << to_string();
  }

  static Checkpoint parse(std::istream& in, const std::string& origin = "<stream>") {
    Checkpoint ck;
    std::string line;
    std::size_t lineno = 0;
    std::string stored_digest;
    auto fail = [&](const std::string& what) {
      throw LoadError(origin + ":" + std::to_string(lineno) + ": " + what);
    };
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty() || line[0] == '#') continue;
      std::istringstream ls(line);
      std::string kind;
      ls >> kind;
      if (kind == "meta") {
        std::string key;
        ls >> key;
        std::string rest;
        std::getline(ls, rest);
        if (!rest.empty() && rest[0] == ' ') rest.erase(0, 1);
        ck.meta_[key] = rest;
      } else if (kind == "tensor") {
        std::string name;
        std::size_t rows = 0, cols = 0;
        if (!(ls >> name >> rows >> cols)) fail("malformed tensor header");
        Matrix m(rows, cols);
        for (std::size_t r = 0; r < rows; ++r) {
          if (!std::getline(in, line)) fail("truncated tensor " + name);
          ++lineno;
          std::istringstream vs(line);
          for (std::size_t c = 0; c < cols; ++c)
            if (!(vs >> m(r, c))) fail("bad value in tensor " + name);
        }
        ck.add(name, m);
      } else if (kind == "digest") {
        std::string algo;
        ls >> algo >> stored_digest;
      } else {
        fail("unknown record '" + kind + "'");
      }
    }
    if (!stored_digest.empty() && stored_digest != ck.digest())
      throw LoadError(origin + ": digest mismatch (file corrupted or edited)");
    return ck;
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw LoadError("checkpoint: cannot open " + path);
    return parse(f, path);
  }

 private:
  std::vector<std::pair<std::string, Matrix>> tensors_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, std::string> meta_;
};

}  // namespace rellax
