#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "tracto/common.hpp"
#include "tracto/streamline.hpp"

namespace tracto {

// TCK track file: ASCII "key: value" header opened by the magic line
// "mrtrix tracks" and closed by "END\n", then float32-LE point triplets
// with a NaN triplet between streamlines and an Inf triplet terminating
// the stream.

inline void write_tck(const Tractogram& t, const std::string& path) {
    for (const auto& s : t.streamlines)
        if (s.points.empty())
            throw std::invalid_argument("write_tck: empty streamline in tractogram");

    std::string base = "mrtrix tracks\ndatatype: Float32LE\ncount: " +
                       std::to_string(t.streamlines.size()) + "\nfile: . ";
    const std::string tail = "\nEND\n";
    // offset depends on its own digit count; iterate to a fixed point
    std::size_t offset = base.size() + 1 + tail.size();
    for (int iter = 0; iter < 4; ++iter)
        offset = base.size() + std::to_string(offset).size() + tail.size();
    std::string header = base + std::to_string(offset) + tail;

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("write_tck: cannot open " + path);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));

    auto put_triplet = [&out](float x, float y, float z) {
        float v[3] = {x, y, z};
        out.write(reinterpret_cast<const char*>(v), sizeof(v));
    };
    const float nan = std::numeric_limits<float>::quiet_NaN();
    const float inf = std::numeric_limits<float>::infinity();
    for (std::size_t i = 0; i < t.streamlines.size(); ++i) {
        if (i) put_triplet(nan, nan, nan);
        for (const auto& p : t.streamlines[i].points)
            put_triplet(static_cast<float>(p.x()), static_cast<float>(p.y()),
                        static_cast<float>(p.z()));
    }
    put_triplet(inf, inf, inf);
    if (!out) throw IoError("write_tck: write failed for " + path);
}

inline Tractogram read_tck(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("read_tck: cannot open " + path);

    std::string line;
    if (!std::getline(in, line) || line != "mrtrix tracks")
        throw FormatError("read_tck: missing \"mrtrix tracks\" magic line");

    std::string datatype;
    long offset = -1;
    while (std::getline(in, line)) {
        if (line == "END") break;
        auto colon = line.find(':');
        if (colon == std::string::npos) continue;
        std::string key = line.substr(0, colon);
        std::string value = line.substr(colon + 1);
        auto first = value.find_first_not_of(" \t");
        value = first == std::string::npos ? "" : value.substr(first);
        if (key == "datatype") {
            datatype = value;
        } else if (key == "file") {
            std::istringstream vs(value);
            std::string dot;
            vs >> dot >> offset;
            if (dot != "." || offset < 0) throw FormatError("read_tck: malformed file: field");
        }
    }
    if (line != "END") throw FormatError("read_tck: header not terminated by END");
    if (datatype.empty()) throw FormatError("read_tck: missing datatype field");
    if (datatype != "Float32LE")
        throw UnsupportedDatatypeError("read_tck: unsupported datatype " + datatype);
    if (offset < 0) throw FormatError("read_tck: missing file: field");

    in.clear();
    in.seekg(offset, std::ios::beg);
    if (!in) throw FormatError("read_tck: data offset beyond end of file");

    Tractogram t;
    Streamline current;
    while (true) {
        float v[3];
        in.read(reinterpret_cast<char*>(v), sizeof(v));
        if (!in) throw FormatError("read_tck: binary section truncated before Inf terminator");
        if (std::isinf(v[0]) && std::isinf(v[1]) && std::isinf(v[2])) {
            if (!current.points.empty()) t.streamlines.push_back(std::move(current));
            break;
        }
        if (std::isnan(v[0]) && std::isnan(v[1]) && std::isnan(v[2])) {
            if (!current.points.empty()) {
                t.streamlines.push_back(std::move(current));
                current = Streamline{};
            }
            continue;
        }
        current.points.emplace_back(v[0], v[1], v[2]);
    }
    return t;
}

} // namespace tracto
