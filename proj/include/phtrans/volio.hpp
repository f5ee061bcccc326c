#pragma once

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>
#include <zlib.h>

#include "phtrans/volume.hpp"

namespace phtrans {

namespace detail {

static_assert(std::endian::native == std::endian::little, "volume I/O assumes a little-endian host");

// NIfTI-1 header, 348 bytes under natural x86 alignment
struct Nifti1Header {
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
    float slice_duration;
    float toffset;
    int32_t glmax, glmin;
    char descrip[80];
    char aux_file[24];
    int16_t qform_code;
    int16_t sform_code;
    float quatern_b, quatern_c, quatern_d;
    float qoffset_x, qoffset_y, qoffset_z;
    float srow_x[4];
    float srow_y[4];
    float srow_z[4];
    char intent_name[16];
    char magic[4];
};
static_assert(sizeof(Nifti1Header) == 348, "unexpected NIfTI header layout");

constexpr int16_t kDtU8 = 2, kDtI16 = 4, kDtF32 = 16;

inline bool is_gzip(const std::vector<char>& bytes) {
    return bytes.size() >= 2 && uint8_t(bytes[0]) == 0x1f && uint8_t(bytes[1]) == 0x8b;
}

inline std::vector<char> read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    PH_CHECK(bool(is), "cannot open '", path, "'");
    return std::vector<char>((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, const std::vector<char>& bytes) {
    std::ofstream os(path, std::ios::binary);
    PH_CHECK(bool(os), "cannot open '", path, "' for writing");
    os.write(bytes.data(), std::streamsize(bytes.size()));
    PH_CHECK(bool(os), "write to '", path, "' failed");
}

inline std::vector<char> gunzip(const std::vector<char>& in) {
    z_stream zs{};
    PH_CHECK(inflateInit2(&zs, 16 + MAX_WBITS) == Z_OK, "gzip: inflateInit failed");
    std::vector<char> out;
    out.resize(std::max<size_t>(in.size() * 4, 1 << 16));
    zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(in.data()));
    zs.avail_in = uInt(in.size());
    size_t written = 0;
    int rc = Z_OK;
    while (rc != Z_STREAM_END) {
        if (written == out.size()) out.resize(out.size() * 2);
        zs.next_out = reinterpret_cast<Bytef*>(out.data() + written);
        zs.avail_out = uInt(out.size() - written);
        rc = inflate(&zs, Z_NO_FLUSH);
        written = out.size() - zs.avail_out;
        if (rc != Z_OK && rc != Z_STREAM_END) {
            inflateEnd(&zs);
            fail("gzip: corrupt stream (zlib rc ", rc, ")");
        }
    }
    inflateEnd(&zs);
    out.resize(written);
    return out;
}

inline std::vector<char> gzip_bytes(const std::vector<char>& in) {
    z_stream zs{};
    PH_CHECK(deflateInit2(&zs, Z_DEFAULT_COMPRESSION, Z_DEFLATED, 16 + MAX_WBITS, 8, Z_DEFAULT_STRATEGY) == Z_OK,
             "gzip: deflateInit failed");
    std::vector<char> out(deflateBound(&zs, uLong(in.size())) + 32);
    zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(in.data()));
    zs.avail_in = uInt(in.size());
    zs.next_out = reinterpret_cast<Bytef*>(out.data());
    zs.avail_out = uInt(out.size());
    int rc = deflate(&zs, Z_FINISH);
    PH_CHECK(rc == Z_STREAM_END, "gzip: deflate failed (rc ", rc, ")");
    out.resize(out.size() - zs.avail_out);
    deflateEnd(&zs);
    return out;
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// NIfTI-1 subset reader/writer (single-file .nii / .nii.gz; uint8, int16,
// float32; 3D; sform preferred over qform)
// ---------------------------------------------------------------------------

inline Volume read_nifti(const std::string& path, VolKind kind) {
    std::vector<char> bytes = detail::read_file(path);
    if (detail::is_gzip(bytes)) bytes = detail::gunzip(bytes);
    PH_CHECK(bytes.size() >= 352, "nifti: '", path, "' too small to hold a header");
    detail::Nifti1Header hdr;
    std::memcpy(&hdr, bytes.data(), sizeof(hdr));
    PH_CHECK(hdr.sizeof_hdr == 348, "nifti: bad sizeof_hdr ", hdr.sizeof_hdr, " in '", path, "'");
    PH_CHECK(std::memcmp(hdr.magic, "n+1", 4) == 0, "nifti: bad magic (only single-file n+1 supported)");
    PH_CHECK(hdr.dim[0] == 3, "nifti: dim[0] must be 3, got ", hdr.dim[0]);
    int64_t ni = hdr.dim[1], nj = hdr.dim[2], nk = hdr.dim[3];
    PH_CHECK(ni >= 1 && nj >= 1 && nk >= 1, "nifti: non-positive dimensions");

    Volume v;
    v.kind = kind;
    v.shape = {nk, nj, ni};  // i is the fastest-varying axis on disk
    v.spacing = {double(hdr.pixdim[3]), double(hdr.pixdim[2]), double(hdr.pixdim[1])};
    for (double& s : v.spacing)
        if (s <= 0) s = 1.0;

    // orientation: sform preferred, else qform, else error
    double col[3][3];  // col[c] = world direction of nifti index axis c (i,j,k)
    if (hdr.sform_code > 0) {
        const float* rows[3] = {hdr.srow_x, hdr.srow_y, hdr.srow_z};
        for (int a = 0; a < 3; ++a)
            for (int c = 0; c < 3; ++c) col[c][a] = double(rows[a][c]);
        v.origin = {double(hdr.srow_x[3]), double(hdr.srow_y[3]), double(hdr.srow_z[3])};
        for (int c = 0; c < 3; ++c) {
            double n = std::sqrt(col[c][0] * col[c][0] + col[c][1] * col[c][1] + col[c][2] * col[c][2]);
            PH_CHECK(n > 1e-12, "nifti: degenerate sform column ", c);
            for (int a = 0; a < 3; ++a) col[c][a] /= n;
        }
    } else if (hdr.qform_code > 0) {
        double b = hdr.quatern_b, c_ = hdr.quatern_c, d = hdr.quatern_d;
        double a2 = 1.0 - (b * b + c_ * c_ + d * d);
        double a = a2 > 0 ? std::sqrt(a2) : 0.0;
        double qfac = hdr.pixdim[0] < 0 ? -1.0 : 1.0;
        double R[3][3] = {{a * a + b * b - c_ * c_ - d * d, 2 * (b * c_ - a * d), 2 * (b * d + a * c_)},
                          {2 * (b * c_ + a * d), a * a + c_ * c_ - b * b - d * d, 2 * (c_ * d - a * b)},
                          {2 * (b * d - a * c_), 2 * (c_ * d + a * b), a * a + d * d - b * b - c_ * c_}};
        for (int cc = 0; cc < 3; ++cc)
            for (int aa = 0; aa < 3; ++aa) col[cc][aa] = R[aa][cc] * (cc == 2 ? qfac : 1.0);
        v.origin = {double(hdr.qoffset_x), double(hdr.qoffset_y), double(hdr.qoffset_z)};
    } else {
        fail("nifti: '", path, "' has neither a valid sform nor qform");
    }
    // volume index axes are (k,j,i)
    for (int a = 0; a < 3; ++a) {
        v.direction[size_t(a)][0] = col[2][a];
        v.direction[size_t(a)][1] = col[1][a];
        v.direction[size_t(a)][2] = col[0][a];
    }

    int64_t voxels = ni * nj * nk;
    size_t offset = size_t(hdr.vox_offset);
    PH_CHECK(offset >= 352, "nifti: vox_offset below header size");
    v.data.resize(size_t(voxels));
    const char* payload = bytes.data() + offset;
    auto need = [&](size_t n) { PH_CHECK(bytes.size() >= offset + n, "nifti: truncated data section"); };
    switch (hdr.datatype) {
        case detail::kDtU8: {
            need(size_t(voxels));
            v.dtype = VolDType::U8;
            for (int64_t i = 0; i < voxels; ++i) v.data[size_t(i)] = float(uint8_t(payload[i]));
            break;
        }
        case detail::kDtI16: {
            need(size_t(voxels) * 2);
            v.dtype = VolDType::I16;
            for (int64_t i = 0; i < voxels; ++i) {
                int16_t x;
                std::memcpy(&x, payload + 2 * i, 2);
                v.data[size_t(i)] = float(x);
            }
            break;
        }
        case detail::kDtF32: {
            need(size_t(voxels) * 4);
            v.dtype = VolDType::F32;
            std::memcpy(v.data.data(), payload, size_t(voxels) * 4);
            break;
        }
        default:
            fail("nifti: unsupported datatype code ", hdr.datatype, " (uint8/int16/float32 only)");
    }

    bool scaled = hdr.scl_slope != 0.f && !(hdr.scl_slope == 1.f && hdr.scl_inter == 0.f);
    if (scaled) {
        for (auto& x : v.data) x = hdr.scl_slope * x + hdr.scl_inter;
        v.dtype = VolDType::F32;  // values no longer match the stored dtype
    } else {
        v.nifti_header = std::make_shared<std::vector<char>>(bytes.begin(), bytes.begin() + 348);
    }
    return v;
}

inline void write_nifti(const std::string& path, const Volume& v) {
    v.check_valid();
    detail::Nifti1Header hdr;
    bool passthrough = false;
    if (v.nifti_header && v.nifti_header->size() == 348) {
        std::memcpy(&hdr, v.nifti_header->data(), 348);
        passthrough = hdr.dim[0] == 3 && int64_t(hdr.dim[1]) == v.shape[2] && int64_t(hdr.dim[2]) == v.shape[1] &&
                      int64_t(hdr.dim[3]) == v.shape[0] &&
                      ((hdr.datatype == detail::kDtU8 && v.dtype == VolDType::U8) ||
                       (hdr.datatype == detail::kDtI16 && v.dtype == VolDType::I16) ||
                       (hdr.datatype == detail::kDtF32 && v.dtype == VolDType::F32));
    }
    if (!passthrough) {
        std::memset(&hdr, 0, sizeof(hdr));
        hdr.sizeof_hdr = 348;
        hdr.regular = 'r';
        hdr.dim[0] = 3;
        hdr.dim[1] = int16_t(v.shape[2]);
        hdr.dim[2] = int16_t(v.shape[1]);
        hdr.dim[3] = int16_t(v.shape[0]);
        for (int i = 4; i < 8; ++i) hdr.dim[i] = 1;
        hdr.pixdim[0] = 1.f;
        hdr.pixdim[1] = float(v.spacing[2]);
        hdr.pixdim[2] = float(v.spacing[1]);
        hdr.pixdim[3] = float(v.spacing[0]);
        switch (v.dtype) {
            case VolDType::U8: hdr.datatype = detail::kDtU8; hdr.bitpix = 8; break;
            case VolDType::I16: hdr.datatype = detail::kDtI16; hdr.bitpix = 16; break;
            case VolDType::F32: hdr.datatype = detail::kDtF32; hdr.bitpix = 32; break;
        }
        hdr.vox_offset = 352.f;
        hdr.scl_slope = 0.f;
        hdr.scl_inter = 0.f;
        hdr.sform_code = 1;
        float* rows[3] = {hdr.srow_x, hdr.srow_y, hdr.srow_z};
        // nifti index axes (i,j,k) are volume axes (2,1,0)
        for (int a = 0; a < 3; ++a) {
            rows[a][0] = float(v.direction[size_t(a)][2] * v.spacing[2]);
            rows[a][1] = float(v.direction[size_t(a)][1] * v.spacing[1]);
            rows[a][2] = float(v.direction[size_t(a)][0] * v.spacing[0]);
            rows[a][3] = float(v.origin[size_t(a)]);
        }
        hdr.qform_code = 0;
        std::memcpy(hdr.magic, "n+1", 4);
    }

    int64_t voxels = v.numel();
    size_t payload_size = size_t(voxels) * (v.dtype == VolDType::U8 ? 1 : v.dtype == VolDType::I16 ? 2 : 4);
    std::vector<char> bytes(352 + payload_size, 0);
    std::memcpy(bytes.data(), &hdr, 348);
    char* payload = bytes.data() + 352;
    switch (v.dtype) {
        case VolDType::U8:
            for (int64_t i = 0; i < voxels; ++i) {
                float x = std::clamp(std::round(v.data[size_t(i)]), 0.f, 255.f);
                payload[i] = char(uint8_t(x));
            }
            break;
        case VolDType::I16:
            for (int64_t i = 0; i < voxels; ++i) {
                int16_t x = int16_t(std::clamp(std::round(v.data[size_t(i)]), -32768.f, 32767.f));
                std::memcpy(payload + 2 * i, &x, 2);
            }
            break;
        case VolDType::F32:
            std::memcpy(payload, v.data.data(), size_t(voxels) * 4);
            break;
    }
    if (detail::ends_with(path, ".gz"))
        detail::write_file(path, detail::gzip_bytes(bytes));
    else
        detail::write_file(path, bytes);
}

// ---------------------------------------------------------------------------
// internal format: UTF-8 JSON header + raw little-endian payload in a sibling
// ".raw" file; the test-suite workhorse
// ---------------------------------------------------------------------------

inline void write_volume_internal(const std::string& json_path, const Volume& v) {
    v.check_valid();
    nlohmann::json j;
    j["shape"] = v.shape;
    j["spacing"] = v.spacing;
    j["dtype"] = dtype_name(v.dtype);
    j["kind"] = v.kind == VolKind::Image ? "image" : "label";
    nlohmann::json dir = nlohmann::json::array();
    for (int a = 0; a < 3; ++a) dir.push_back(v.direction[size_t(a)]);
    j["orientation"] = {{"direction", dir}, {"origin", v.origin}};
    std::ofstream os(json_path);
    PH_CHECK(bool(os), "cannot open '", json_path, "' for writing");
    os << j.dump(2) << "\n";

    std::string raw_path = json_path + ".raw";
    std::vector<char> payload(v.data.size() * 4);
    std::memcpy(payload.data(), v.data.data(), payload.size());
    detail::write_file(raw_path, payload);
}

inline Volume read_volume_internal(const std::string& json_path) {
    std::ifstream is(json_path);
    PH_CHECK(bool(is), "cannot open '", json_path, "'");
    nlohmann::json j = nlohmann::json::parse(is);
    Volume v;
    j.at("shape").get_to(v.shape);
    j.at("spacing").get_to(v.spacing);
    std::string d = j.at("dtype");
    v.dtype = d == "uint8" ? VolDType::U8 : d == "int16" ? VolDType::I16 : VolDType::F32;
    v.kind = j.at("kind") == "label" ? VolKind::Label : VolKind::Image;
    auto dir = j.at("orientation").at("direction");
    for (int a = 0; a < 3; ++a) dir.at(a).get_to(v.direction[size_t(a)]);
    j.at("orientation").at("origin").get_to(v.origin);

    std::vector<char> payload = detail::read_file(json_path + ".raw");
    PH_CHECK(int64_t(payload.size()) == numel_of(v.shape) * 4, "internal volume: payload size mismatch for '",
             json_path, "'");
    v.data.resize(payload.size() / 4);
    std::memcpy(v.data.data(), payload.data(), payload.size());
    return v;
}

// dispatch by extension: .nii/.nii.gz vs internal .json
inline Volume read_volume(const std::string& path, VolKind kind) {
    if (detail::ends_with(path, ".nii") || detail::ends_with(path, ".nii.gz")) return read_nifti(path, kind);
    Volume v = read_volume_internal(path);
    v.kind = kind;
    return v;
}

inline void write_volume(const std::string& path, const Volume& v) {
    if (detail::ends_with(path, ".nii") || detail::ends_with(path, ".nii.gz"))
        write_nifti(path, v);
    else
        write_volume_internal(path, v);
}

}  // namespace phtrans
