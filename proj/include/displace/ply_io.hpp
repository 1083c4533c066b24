#pragma once

// Polygon-file-format reader/writer. Reads ASCII and binary little-endian
// variants; x/y/z come from float or double properties, per-point labels from
// an integer property named "class", and everything else (including list
// properties and non-vertex elements) is skipped. Errors carry the line
// number (header, ASCII body) or byte offset (binary body).

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "displace/errors.hpp"
#include "displace/geometry.hpp"

namespace displace::ply {

enum class Format { Ascii, BinaryLittleEndian };

namespace detail {

struct Property {
  std::string name;
  std::string type;      // scalar type, or element type for lists
  std::string count_type; // nonempty for list properties
  bool is_list = false;
};

struct Element {
  std::string name;
  std::size_t count = 0;
  std::vector<Property> props;
};

inline std::size_t scalar_size(const std::string& type, std::size_t line) {
  if (type == "char" || type == "int8" || type == "uchar" || type == "uint8") return 1;
  if (type == "short" || type == "int16" || type == "ushort" || type == "uint16") return 2;
  if (type == "int" || type == "int32" || type == "uint" || type == "uint32" || type == "float" ||
      type == "float32")
    return 4;
  if (type == "double" || type == "float64") return 8;
  throw ParseError("ply: unknown property type '" + type + "' (header line " +
                   std::to_string(line) + ")");
}

inline bool is_float_type(const std::string& type) {
  return type == "float" || type == "float32" || type == "double" || type == "float64";
}

inline bool is_int_type(const std::string& type) {
  return !is_float_type(type);
}

inline double read_binary_scalar(const char* p, const std::string& type) {
  auto load = [&]<class T>() {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return static_cast<double>(v);
  };
  if (type == "char" || type == "int8") return load.operator()<std::int8_t>();
  if (type == "uchar" || type == "uint8") return load.operator()<std::uint8_t>();
  if (type == "short" || type == "int16") return load.operator()<std::int16_t>();
  if (type == "ushort" || type == "uint16") return load.operator()<std::uint16_t>();
  if (type == "int" || type == "int32") return load.operator()<std::int32_t>();
  if (type == "uint" || type == "uint32") return load.operator()<std::uint32_t>();
  if (type == "float" || type == "float32") return load.operator()<float>();
  return load.operator()<double>();
}

} // namespace detail

/// Reads a cloud; labels are filled when an integer "class" vertex property
/// is present (num_classes = max id + 1).
inline LabeledCloud read_ply(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("ply: cannot open '" + path + "'");
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  // ---- header ----
  std::size_t pos = 0, line_no = 0;
  auto next_line = [&]() -> std::string {
    if (pos >= data.size())
      throw ParseError("ply: unexpected end of header (line " + std::to_string(line_no) + ")");
    const std::size_t eol = data.find('\n', pos);
    std::string line = data.substr(pos, eol == std::string::npos ? std::string::npos : eol - pos);
    pos = eol == std::string::npos ? data.size() : eol + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
  };

  if (next_line() != "ply") throw ParseError("ply: missing 'ply' magic (line 1)");
  Format format = Format::Ascii;
  bool have_format = false;
  std::vector<detail::Element> elements;
  while (true) {
    const std::string line = next_line();
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "comment" || word == "obj_info" || word.empty()) continue;
    if (word == "format") {
      std::string kind, version;
      ls >> kind >> version;
      if (kind == "ascii")
        format = Format::Ascii;
      else if (kind == "binary_little_endian")
        format = Format::BinaryLittleEndian;
      else
        throw ParseError("ply: unsupported format '" + kind + "' (line " +
                         std::to_string(line_no) + ")");
      have_format = true;
    } else if (word == "element") {
      detail::Element e;
      if (!(ls >> e.name >> e.count))
        throw ParseError("ply: malformed element declaration (line " + std::to_string(line_no) +
                         ")");
      elements.push_back(std::move(e));
    } else if (word == "property") {
      if (elements.empty())
        throw ParseError("ply: property before any element (line " + std::to_string(line_no) +
                         ")");
      detail::Property p;
      std::string t;
      ls >> t;
      if (t == "list") {
        p.is_list = true;
        if (!(ls >> p.count_type >> p.type >> p.name))
          throw ParseError("ply: malformed list property (line " + std::to_string(line_no) + ")");
        detail::scalar_size(p.count_type, line_no);
      } else {
        p.type = t;
        if (!(ls >> p.name))
          throw ParseError("ply: malformed property (line " + std::to_string(line_no) + ")");
      }
      detail::scalar_size(p.type, line_no);
      elements.back().props.push_back(std::move(p));
    } else if (word == "end_header") {
      break;
    } else {
      throw ParseError("ply: unrecognized header keyword '" + word + "' (line " +
                       std::to_string(line_no) + ")");
    }
  }
  if (!have_format) throw ParseError("ply: header lacks a format declaration");

  // Locate the coordinate and label properties of the vertex element.
  LabeledCloud out;
  const detail::Element* vertex = nullptr;
  for (const auto& e : elements)
    if (e.name == "vertex") vertex = &e;
  if (!vertex) throw ParseError("ply: no vertex element declared");
  int coord_prop[3] = {-1, -1, -1};
  int class_prop = -1;
  for (std::size_t i = 0; i < vertex->props.size(); ++i) {
    const auto& p = vertex->props[i];
    if (p.is_list) continue;
    const int axis = p.name == "x" ? 0 : p.name == "y" ? 1 : p.name == "z" ? 2 : -1;
    if (axis >= 0) {
      if (!detail::is_float_type(p.type))
        throw ParseError("ply: coordinate property '" + p.name + "' has non-float type '" +
                         p.type + "'");
      coord_prop[axis] = static_cast<int>(i);
    } else if (p.name == "class" && detail::is_int_type(p.type)) {
      class_prop = static_cast<int>(i);
    }
  }
  for (int a = 0; a < 3; ++a)
    if (coord_prop[a] < 0)
      throw ParseError(std::string("ply: vertex element lacks required property '") +
                       char('x' + a) + "'");

  // ---- body, element by element in declared order ----
  std::vector<double> scalars; // per-vertex scratch
  for (const auto& e : elements) {
    const bool capture = &e == vertex;
    if (capture) {
      out.points.reserve(e.count);
      if (class_prop >= 0) out.labels.reserve(e.count);
    }
    for (std::size_t row = 0; row < e.count; ++row) {
      if (format == Format::Ascii) {
        std::string line;
        do {
          if (pos >= data.size())
            throw ParseError("ply: expected " + std::to_string(e.count) + " '" + e.name +
                             "' rows but data ends after " + std::to_string(row) + " (line " +
                             std::to_string(line_no) + ")");
          line = next_line();
        } while (line.find_first_not_of(" \t") == std::string::npos);
        std::istringstream ls(line);
        scalars.clear();
        for (const auto& p : e.props) {
          if (p.is_list) {
            std::size_t n;
            if (!(ls >> n))
              throw ParseError("ply: bad list count in '" + e.name + "' row (line " +
                               std::to_string(line_no) + ")");
            double v;
            for (std::size_t i = 0; i < n; ++i)
              if (!(ls >> v))
                throw ParseError("ply: short list in '" + e.name + "' row (line " +
                                 std::to_string(line_no) + ")");
            scalars.push_back(0); // placeholder; lists are never captured
          } else {
            double v;
            if (!(ls >> v))
              throw ParseError("ply: missing value for property '" + p.name + "' (line " +
                               std::to_string(line_no) + ")");
            scalars.push_back(v);
          }
        }
      } else {
        scalars.clear();
        for (const auto& p : e.props) {
          if (p.is_list) {
            const std::size_t cs = detail::scalar_size(p.count_type, 0);
            if (pos + cs > data.size())
              throw ParseError("ply: truncated list count (byte offset " + std::to_string(pos) +
                               ")");
            const auto n = static_cast<std::size_t>(
                detail::read_binary_scalar(data.data() + pos, p.count_type));
            pos += cs;
            const std::size_t es = detail::scalar_size(p.type, 0);
            if (pos + n * es > data.size())
              throw ParseError("ply: truncated list data (byte offset " + std::to_string(pos) +
                               ")");
            pos += n * es;
            scalars.push_back(0);
          } else {
            const std::size_t es = detail::scalar_size(p.type, 0);
            if (pos + es > data.size())
              throw ParseError("ply: expected " + std::to_string(e.count) + " '" + e.name +
                               "' rows but data ends in row " + std::to_string(row) +
                               " (byte offset " + std::to_string(pos) + ")");
            scalars.push_back(detail::read_binary_scalar(data.data() + pos, p.type));
            pos += es;
          }
        }
      }
      if (capture) {
        out.points.push_back({scalars[coord_prop[0]], scalars[coord_prop[1]],
                              scalars[coord_prop[2]]});
        if (class_prop >= 0) out.labels.push_back(static_cast<int>(scalars[class_prop]));
      }
    }
  }

  if (!out.labels.empty()) {
    int max_id = 0;
    for (int l : out.labels) {
      if (l < 0) throw ParseError("ply: negative class id " + std::to_string(l));
      max_id = std::max(max_id, l);
    }
    out.num_classes = max_id + 1;
  }
  return out;
}

/// Writes points (double precision) with an optional integer "class" property.
inline void write_ply(const std::string& path, const Cloud& points,
                      const std::vector<int>& labels = {}, Format format = Format::Ascii) {
  if (!labels.empty() && labels.size() != points.size())
    throw ContractError("write_ply: label count does not match point count");

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("ply: cannot open '" + path + "' for writing");

  out << "ply\n"
      << (format == Format::Ascii ? "format ascii 1.0\n" : "format binary_little_endian 1.0\n")
      << "element vertex " << points.size() << "\n"
      << "property double x\nproperty double y\nproperty double z\n";
  if (!labels.empty()) out << "property int class\n";
  out << "end_header\n";

  if (format == Format::Ascii) {
    char buf[96];
    for (std::size_t i = 0; i < points.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g", points[i][0], points[i][1],
                    points[i][2]);
      out << buf;
      if (!labels.empty()) out << ' ' << labels[i];
      out << '\n';
    }
  } else {
    for (std::size_t i = 0; i < points.size(); ++i) {
      out.write(reinterpret_cast<const char*>(points[i].data()), 24);
      if (!labels.empty()) {
        const std::int32_t c = labels[i];
        out.write(reinterpret_cast<const char*>(&c), 4);
      }
    }
  }
  if (!out) throw IoError("ply: write to '" + path + "' failed");
}

inline void write_ply(const std::string& path, const LabeledCloud& cloud,
                      Format format = Format::Ascii) {
  write_ply(path, cloud.points, cloud.labels, format);
}

} // namespace displace::ply
