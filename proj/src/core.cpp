#include "dtx/core.hpp"

#include <fstream>

#include "dtx/binio.hpp"
#include "json.hpp"

namespace dtx {

void write_embeddings(const std::vector<std::string>& ids, const Mat& m,
                      const std::string& path) {
    check(static_cast<int>(ids.size()) == m.rows, ErrorKind::data,
          "write_embeddings: id count != rows");
    BinWriter w(path);
    w.magic("DTXE");
    w.u32(1);
    w.u64(static_cast<uint64_t>(m.rows));
    w.u32(static_cast<uint32_t>(m.cols));
    w.f32s(m.d.data(), m.d.size());
    for (const auto& id : ids) w.str(id);
    w.close();
}

void read_embeddings(const std::string& path, std::vector<std::string>& ids,
                     Mat& m) {
    BinReader r(path);
    r.expect_magic("DTXE");
    r.expect_version(1);
    uint64_t rows = r.u64();
    uint32_t dim = r.u32();
    check(rows <= (1ull << 32) && dim <= (1u << 20), ErrorKind::data,
          path + ": unreasonable header");
    m = Mat(static_cast<int>(rows), static_cast<int>(dim));
    r.f32s(m.d.data(), m.d.size());
    ids.clear();
    ids.reserve(rows);
    for (uint64_t i = 0; i < rows; ++i) ids.push_back(r.str());
}

void write_feature_grid(const FeatureGrid& g, const std::string& path) {
    check(g.patches.rows == g.grid_h * g.grid_w, ErrorKind::data,
          "feature grid: patches.rows != grid_h*grid_w");
    check(g.patches.cols == g.dim(), ErrorKind::data,
          "feature grid: patch dim != cls dim");
    BinWriter w(path);
    w.magic("DTXF");
    w.u32(1);
    w.u32(static_cast<uint32_t>(g.grid_h));
    w.u32(static_cast<uint32_t>(g.grid_w));
    w.u32(static_cast<uint32_t>(g.dim()));
    w.f32s(g.cls.data(), g.cls.size());
    w.f32s(g.patches.d.data(), g.patches.d.size());
    w.close();
}

FeatureGrid read_feature_grid(const std::string& path) {
    BinReader r(path);
    r.expect_magic("DTXF");
    r.expect_version(1);
    FeatureGrid g;
    g.grid_h = static_cast<int>(r.u32());
    g.grid_w = static_cast<int>(r.u32());
    int dim = static_cast<int>(r.u32());
    check(g.grid_h > 0 && g.grid_w > 0 && dim > 0, ErrorKind::data,
          path + ": bad grid header");
    g.cls.resize(dim);
    r.f32s(g.cls.data(), dim);
    g.patches = Mat(g.grid_h * g.grid_w, dim);
    r.f32s(g.patches.d.data(), g.patches.d.size());
    return g;
}

std::vector<CaptionLine> read_captions_jsonl(const std::string& path) {
    std::ifstream f(path);
    check(f.good(), ErrorKind::data, "cannot open: " + path);
    std::vector<CaptionLine> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        check(!j.is_discarded() && j.contains("id") && j.contains("caption"),
              ErrorKind::data,
              path + ":" + std::to_string(lineno) + ": bad caption line");
        out.push_back({j["id"].get<std::string>(), j["caption"].get<std::string>()});
    }
    return out;
}

void write_captions_jsonl(const std::vector<CaptionLine>& lines,
                          const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    check(f.good(), ErrorKind::data, "cannot open for write: " + path);
    for (const auto& l : lines) {
        nlohmann::json j;
        j["id"] = l.id;
        j["caption"] = l.caption;
        f << j.dump() << "\n";
    }
    check(!f.fail(), ErrorKind::data, "write failed: " + path);
}

std::vector<std::string> read_id_list(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), ErrorKind::data, "cannot open: " + path);
    std::vector<std::string> out;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) out.push_back(line);
    }
    return out;
}

void write_id_list(const std::vector<std::string>& ids, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    check(f.good(), ErrorKind::data, "cannot open for write: " + path);
    for (const auto& id : ids) f << id << "\n";
    check(!f.fail(), ErrorKind::data, "write failed: " + path);
}

bool valid_utf8(const std::string& s) {
    size_t i = 0, n = s.size();
    while (i < n) {
        unsigned char c = s[i];
        int extra;
        uint32_t cp;
        if (c < 0x80) { ++i; continue; }
        else if ((c & 0xe0) == 0xc0) { extra = 1; cp = c & 0x1f; }
        else if ((c & 0xf0) == 0xe0) { extra = 2; cp = c & 0x0f; }
        else if ((c & 0xf8) == 0xf0) { extra = 3; cp = c & 0x07; }
        else return false;
        if (i + extra >= n) return false;
        for (int k = 1; k <= extra; ++k) {
            unsigned char cc = s[i + k];
            if ((cc & 0xc0) != 0x80) return false;
            cp = (cp << 6) | (cc & 0x3f);
        }
        // overlong / surrogate / out of range
        static const uint32_t mins[4] = {0, 0x80, 0x800, 0x10000};
        if (cp < mins[extra]) return false;
        if (cp > 0x10ffff || (cp >= 0xd800 && cp <= 0xdfff)) return false;
        i += extra + 1;
    }
    return true;
}

}  // namespace dtx
