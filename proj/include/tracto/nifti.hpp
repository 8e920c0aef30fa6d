#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "tracto/common.hpp"
#include "tracto/volume.hpp"

namespace tracto {

// NIfTI-1 header, little-endian single-file (.nii) layout. The canonical
// struct is exactly 348 bytes with natural alignment.
struct NiftiHeader {
    int32_t sizeof_hdr;
    char data_type[10];
    char db_name[18];
    int32_t extents;
    int16_t session_error;
    char regular;
    char dim_info;
    int16_t dim[8];
    float intent_p1, intent_p2, intent_p3;
    int16_t intent_code;
    int16_t datatype;
    int16_t bitpix;
    int16_t slice_start;
    float pixdim[8];
    float vox_offset;
    float scl_slope;
    float scl_inter;
    int16_t slice_end;
    char slice_code;
    char xyzt_units;
    float cal_max, cal_min;
    float slice_duration, toffset;
    int32_t glmax, glmin;
    char descrip[80];
    char aux_file[24];
    int16_t qform_code;
    int16_t sform_code;
    float quatern_b, quatern_c, quatern_d;
    float qoffset_x, qoffset_y, qoffset_z;
    float srow_x[4], srow_y[4], srow_z[4];
    char intent_name[16];
    char magic[4];
};
static_assert(sizeof(NiftiHeader) == 348, "NIfTI-1 header must be 348 bytes");

enum class NiftiDatatype : int16_t {
    Uint8 = 2,
    Int16 = 4,
    Float32 = 16,
    Float64 = 64,
};

// In-memory image as stored in the file: 3D or 4D grid in native index
// order (first index fastest) plus the voxel->RAS affine.
struct NiftiImage {
    int ndim = 3;
    std::array<int, 4> dim{1, 1, 1, 1};   // H, W, D, G (G = 1 for 3D)
    Affine affine = Affine::Identity();
    std::vector<double> data;              // scl_slope/scl_inter already applied

    std::size_t voxels() const {
        return static_cast<std::size_t>(dim[0]) * dim[1] * dim[2] * dim[3];
    }
};

namespace detail {

inline Affine affine_from_header(const NiftiHeader& h) {
    Affine a = Affine::Identity();
    if (h.sform_code > 0) {
        for (int c = 0; c < 4; ++c) {
            a(0, c) = h.srow_x[c];
            a(1, c) = h.srow_y[c];
            a(2, c) = h.srow_z[c];
        }
        return a;
    }
    if (h.qform_code > 0) {
        // standard quaternion-to-rotation formula with qfac from pixdim[0]
        double b = h.quatern_b, c = h.quatern_c, d = h.quatern_d;
        double aa = 1.0 - b * b - c * c - d * d;
        aa = aa < 0.0 ? 0.0 : std::sqrt(aa);
        double qfac = h.pixdim[0] < 0.0f ? -1.0 : 1.0;
        double sx = h.pixdim[1], sy = h.pixdim[2], sz = h.pixdim[3] * qfac;
        a(0, 0) = (aa * aa + b * b - c * c - d * d) * sx;
        a(0, 1) = (2 * b * c - 2 * aa * d) * sy;
        a(0, 2) = (2 * b * d + 2 * aa * c) * sz;
        a(1, 0) = (2 * b * c + 2 * aa * d) * sx;
        a(1, 1) = (aa * aa + c * c - b * b - d * d) * sy;
        a(1, 2) = (2 * c * d - 2 * aa * b) * sz;
        a(2, 0) = (2 * b * d - 2 * aa * c) * sx;
        a(2, 1) = (2 * c * d + 2 * aa * b) * sy;
        a(2, 2) = (aa * aa + d * d - b * b - c * c) * sz;
        a(0, 3) = h.qoffset_x;
        a(1, 3) = h.qoffset_y;
        a(2, 3) = h.qoffset_z;
        return a;
    }
    for (int i = 0; i < 3; ++i) {
        double p = h.pixdim[i + 1];
        a(i, i) = p != 0.0 ? p : 1.0;
    }
    return a;
}

template <typename T>
void read_payload(std::ifstream& in, std::size_t n, double slope, double inter,
                  std::vector<double>& out) {
    std::vector<T> raw(n);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * sizeof(T)));
    if (!in) throw IoError("read_nifti: truncated data section");
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        out[i] = slope != 0.0 ? slope * static_cast<double>(raw[i]) + inter
                              : static_cast<double>(raw[i]);
}

} // namespace detail

inline NiftiImage read_nifti(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("read_nifti: cannot open " + path);
    NiftiHeader h{};
    in.read(reinterpret_cast<char*>(&h), sizeof(h));
    if (!in) throw FormatError("read_nifti: file shorter than a NIfTI-1 header");
    if (h.sizeof_hdr != 348)
        throw FormatError("read_nifti: sizeof_hdr != 348 (not little-endian NIfTI-1?)");
    if (std::memcmp(h.magic, "n+1", 4) != 0)
        throw FormatError("read_nifti: bad magic (expected \"n+1\\0\")");
    if (h.dim[0] != 3 && h.dim[0] != 4)
        throw FormatError("read_nifti: only 3D and 4D images are supported");

    NiftiImage img;
    img.ndim = h.dim[0];
    for (int i = 0; i < 4; ++i) img.dim[static_cast<std::size_t>(i)] = i < img.ndim ? h.dim[i + 1] : 1;
    for (int v : img.dim)
        if (v <= 0) throw FormatError("read_nifti: non-positive dimension");
    img.affine = detail::affine_from_header(h);

    std::size_t offset = static_cast<std::size_t>(h.vox_offset);
    if (offset < sizeof(NiftiHeader)) throw FormatError("read_nifti: vox_offset inside header");
    in.seekg(static_cast<std::streamoff>(offset), std::ios::beg);
    if (!in) throw FormatError("read_nifti: vox_offset beyond end of file");

    std::size_t n = img.voxels();
    double slope = h.scl_slope, inter = h.scl_inter;
    switch (h.datatype) {
        case static_cast<int16_t>(NiftiDatatype::Uint8):
            detail::read_payload<uint8_t>(in, n, slope, inter, img.data);
            break;
        case static_cast<int16_t>(NiftiDatatype::Int16):
            detail::read_payload<int16_t>(in, n, slope, inter, img.data);
            break;
        case static_cast<int16_t>(NiftiDatatype::Float32):
            detail::read_payload<float>(in, n, slope, inter, img.data);
            break;
        case static_cast<int16_t>(NiftiDatatype::Float64):
            detail::read_payload<double>(in, n, slope, inter, img.data);
            break;
        default:
            throw UnsupportedDatatypeError("read_nifti: unsupported datatype code " +
                                           std::to_string(h.datatype));
    }
    return img;
}

// Writes a float32 single-file .nii with the affine recorded as the sform.
inline void write_nifti(const NiftiImage& img, const std::string& path) {
    if (img.data.size() != img.voxels())
        throw std::invalid_argument("write_nifti: data size does not match dims");
    NiftiHeader h{};
    h.sizeof_hdr = 348;
    h.regular = 'r';
    h.dim[0] = static_cast<int16_t>(img.ndim);
    for (int i = 0; i < 7; ++i) h.dim[i + 1] = 1;
    for (int i = 0; i < img.ndim; ++i) h.dim[i + 1] = static_cast<int16_t>(img.dim[static_cast<std::size_t>(i)]);
    h.datatype = static_cast<int16_t>(NiftiDatatype::Float32);
    h.bitpix = 32;
    h.pixdim[0] = 1.0f;
    for (int i = 0; i < 3; ++i)
        h.pixdim[i + 1] = static_cast<float>(img.affine.block<3, 1>(0, i).norm());
    h.pixdim[4] = 1.0f;
    h.vox_offset = 352.0f;
    h.scl_slope = 1.0f;
    h.scl_inter = 0.0f;
    h.sform_code = 1;
    h.qform_code = 0;
    for (int c = 0; c < 4; ++c) {
        h.srow_x[c] = static_cast<float>(img.affine(0, c));
        h.srow_y[c] = static_cast<float>(img.affine(1, c));
        h.srow_z[c] = static_cast<float>(img.affine(2, c));
    }
    std::memcpy(h.magic, "n+1", 4);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("write_nifti: cannot open " + path);
    out.write(reinterpret_cast<const char*>(&h), sizeof(h));
    const char ext[4] = {0, 0, 0, 0};
    out.write(ext, 4);
    std::vector<float> raw(img.data.size());
    for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = static_cast<float>(img.data[i]);
    out.write(reinterpret_cast<const char*>(raw.data()),
              static_cast<std::streamsize>(raw.size() * sizeof(float)));
    if (!out) throw IoError("write_nifti: write failed for " + path);
}

inline NiftiImage to_nifti(const DwiVolume& v) {
    NiftiImage img;
    img.ndim = 4;
    img.dim = {v.H, v.W, v.D, v.G};
    img.affine = v.affine;
    img.data = v.data;
    return img;
}

inline NiftiImage to_nifti(const ScalarMap& m) {
    NiftiImage img;
    img.ndim = 3;
    img.dim = {m.H, m.W, m.D, 1};
    img.affine = m.affine;
    img.data = m.data;
    return img;
}

inline void write_nifti(const DwiVolume& v, const std::string& path) { write_nifti(to_nifti(v), path); }
inline void write_nifti(const ScalarMap& m, const std::string& path) { write_nifti(to_nifti(m), path); }

inline DwiVolume make_dwi(const NiftiImage& img, std::vector<Vec3> gradients,
                          std::vector<double> bvalues) {
    if (img.ndim != 4) throw FormatError("make_dwi: expected a 4D image");
    DwiVolume v;
    v.H = img.dim[0];
    v.W = img.dim[1];
    v.D = img.dim[2];
    v.G = img.dim[3];
    v.affine = img.affine;
    v.data = img.data;
    v.gradients = std::move(gradients);
    v.bvalues = std::move(bvalues);
    v.validate();
    return v;
}

inline ScalarMap make_scalar_map(const NiftiImage& img, ScalarMap::Kind kind) {
    if (img.ndim != 3) throw FormatError("make_scalar_map: expected a 3D image");
    ScalarMap m;
    m.H = img.dim[0];
    m.W = img.dim[1];
    m.D = img.dim[2];
    m.affine = img.affine;
    m.data = img.data;
    m.kind = kind;
    m.validate();
    return m;
}

// --- FSL-style gradient tables ------------------------------------------

inline std::vector<std::vector<double>> read_numeric_rows(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::vector<double> row;
        double v;
        while (ls >> v) row.push_back(v);
        if (!ls.eof() && ls.fail()) throw FormatError("non-numeric token in " + path);
        if (!row.empty()) rows.push_back(std::move(row));
    }
    return rows;
}

inline std::vector<double> read_bvals(const std::string& path) {
    auto rows = read_numeric_rows(path);
    if (rows.size() != 1) throw FormatError("bvals: expected a single row in " + path);
    return rows[0];
}

inline std::vector<Vec3> read_bvecs(const std::string& path) {
    auto rows = read_numeric_rows(path);
    if (rows.size() != 3) throw FormatError("bvecs: expected 3 rows in " + path);
    std::size_t g = rows[0].size();
    if (rows[1].size() != g || rows[2].size() != g)
        throw FormatError("bvecs: rows have unequal length in " + path);
    std::vector<Vec3> out(g);
    for (std::size_t i = 0; i < g; ++i) out[i] = Vec3(rows[0][i], rows[1][i], rows[2][i]);
    return out;
}

inline void write_bvals(const std::vector<double>& bvals, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("write_bvals: cannot open " + path);
    out.precision(17);
    for (std::size_t i = 0; i < bvals.size(); ++i) out << (i ? " " : "") << bvals[i];
    out << "\n";
    if (!out) throw IoError("write_bvals: write failed for " + path);
}

inline void write_bvecs(const std::vector<Vec3>& bvecs, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("write_bvecs: cannot open " + path);
    out.precision(17);
    for (int r = 0; r < 3; ++r) {
        for (std::size_t i = 0; i < bvecs.size(); ++i) out << (i ? " " : "") << bvecs[i][r];
        out << "\n";
    }
    if (!out) throw IoError("write_bvecs: write failed for " + path);
}

} // namespace tracto
