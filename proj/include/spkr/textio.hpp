// spkr/textio.hpp

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

// Whitespace-separated text model files.  Every real number is printed with
// 17 significant digits, which round-trips an IEEE double exactly.  A file
// starts with "<tag> <version>" and continues with "<key> <values...>" lines.

#ifndef SPKR_TEXTIO_HPP_
#define SPKR_TEXTIO_HPP_

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "spkr/common.hpp"

namespace spkr {

inline std::string FormatDouble(double x, int digits = 17) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", digits, x);
  return buf;
}

class TextWriter {
 public:
  TextWriter(const std::string &tag, int version) {
    out_ << tag << ' ' << version << '\n';
  }

  template <typename T>
  void Scalar(const std::string &key, const T &value) {
    out_ << key << ' ';
    if constexpr (std::is_floating_point_v<T>)
      out_ << FormatDouble(value);
    else
      out_ << value;
    out_ << '\n';
  }

  void Vec(const std::string &key, const Eigen::Ref<const Vector> &v) {
    out_ << key << ' ' << v.size();
    for (Eigen::Index i = 0; i < v.size(); ++i) out_ << ' ' << FormatDouble(v(i));
    out_ << '\n';
  }

  template <typename Derived>
  void Mat(const std::string &key, const Eigen::MatrixBase<Derived> &m) {
    out_ << key << ' ' << m.rows() << ' ' << m.cols() << '\n';
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        if (c) out_ << ' ';
        out_ << FormatDouble(m(r, c));
      }
      out_ << '\n';
    }
  }

  std::string str() const { return out_.str(); }

  void Save(const std::filesystem::path &path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open " + path.string() + " for writing");
    os << out_.str();
    if (!os) throw Error("write failed: " + path.string());
  }

 private:
  std::ostringstream out_;
};

class TextReader {
 public:
  /// Parses the header and checks tag and version.
  TextReader(std::string content, const std::string &tag, int version,
             std::string source = "<memory>")
      : in_(std::move(content)), source_(std::move(source)) {
    std::string got_tag;
    int got_version = -1;
    in_ >> got_tag >> got_version;
    if (got_tag != tag)
      Fail("expected tag '" + tag + "', found '" + got_tag + "'");
    if (got_version != version)
      Fail("unsupported version " + std::to_string(got_version));
  }

  static TextReader FromFile(const std::filesystem::path &path,
                             const std::string &tag, int version) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return TextReader(ss.str(), tag, version, path.string());
  }

  void Expect(const std::string &key) {
    std::string k;
    in_ >> k;
    if (k != key) Fail("expected key '" + key + "', found '" + k + "'");
  }

  template <typename T>
  T Scalar(const std::string &key) {
    Expect(key);
    return Read<T>();
  }

  Vector Vec(const std::string &key) {
    Expect(key);
    const auto n = Read<Eigen::Index>();
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = Read<double>();
    return v;
  }

  Matrix Mat(const std::string &key) {
    Expect(key);
    const auto rows = Read<Eigen::Index>();
    const auto cols = Read<Eigen::Index>();
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = Read<double>();
    return m;
  }

  template <typename T>
  T Read() {
    std::string tok;
    if (!(in_ >> tok)) Fail("unexpected end of file");
    if constexpr (std::is_same_v<T, std::string>) {
      return tok;
    } else if constexpr (std::is_floating_point_v<T>) {
      // strtod accepts inf/nan spellings that from_chars handles inconsistently.
      char *end = nullptr;
      const double v = std::strtod(tok.c_str(), &end);
      if (end == tok.c_str() || *end != '\0') Fail("bad number '" + tok + "'");
      return static_cast<T>(v);
    } else {
      T v{};
      auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
      if (ec != std::errc() || p != tok.data() + tok.size())
        Fail("bad integer '" + tok + "'");
      return v;
    }
  }

  [[noreturn]] void Fail(const std::string &msg) const {
    throw Error(source_ + ": " + msg);
  }

  const std::string &source() const { return source_; }

 private:
  std::istringstream in_;
  std::string source_;
};

inline std::string ReadFileToString(const std::filesystem::path &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void WriteStringToFile(const std::filesystem::path &path,
                              const std::string &content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os << content;
  if (!os) throw Error("write failed: " + path.string());
}

/// Splits a line on tab characters.
inline std::vector<std::string> SplitTabs(const std::string &line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    out.push_back(line.substr(start, pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace spkr

#endif  // SPKR_TEXTIO_HPP_
