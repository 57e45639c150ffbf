#include "dtx/segmap.hpp"

#include <fstream>

#include "dtx/binio.hpp"
#include "json.hpp"

namespace dtx {

void write_segmentation(const SegmentationMap& m, const std::string& path) {
    check(m.labels.size() == static_cast<size_t>(m.height) * m.width,
          ErrorKind::data, "segmentation map: label buffer size mismatch");
    BinWriter w(path);
    w.magic("DTXS");
    w.u32(1);
    w.u32(static_cast<uint32_t>(m.height));
    w.u32(static_cast<uint32_t>(m.width));
    w.raw(m.labels.data(), m.labels.size() * 2);
    w.close();

    nlohmann::json j;
    j["class_names"] = m.class_names;
    j["ignore_index"] = m.ignore_index;
    std::ofstream sf(path + ".json", std::ios::trunc);
    check(sf.good(), ErrorKind::data, "cannot write sidecar: " + path + ".json");
    sf << j.dump(2) << "\n";
}

SegmentationMap read_segmentation(const std::string& path) {
    BinReader r(path);
    r.expect_magic("DTXS");
    r.expect_version(1);
    SegmentationMap m;
    m.height = static_cast<int>(r.u32());
    m.width = static_cast<int>(r.u32());
    check(m.height > 0 && m.width > 0 && m.height < (1 << 16) && m.width < (1 << 16),
          ErrorKind::data, path + ": bad dimensions");
    m.labels.resize(static_cast<size_t>(m.height) * m.width);
    r.raw(m.labels.data(), m.labels.size() * 2);

    std::ifstream sf(path + ".json");
    if (sf.good()) {
        nlohmann::json j = nlohmann::json::parse(sf, nullptr, false);
        if (!j.is_discarded()) {
            if (j.contains("class_names"))
                m.class_names = j["class_names"].get<std::vector<std::string>>();
            if (j.contains("ignore_index"))
                m.ignore_index = j["ignore_index"].get<uint16_t>();
        }
    }
    for (uint16_t l : m.labels)
        check(l == m.ignore_index || m.class_names.empty() ||
                  l < m.class_names.size(),
              ErrorKind::data, path + ": label out of class range");
    return m;
}

void write_segmentation_ppm(const SegmentationMap& m, const std::string& path) {
    static const uint8_t palette[16][3] = {
        {128, 128, 128}, {220, 40, 40},  {40, 180, 40},  {40, 80, 220},
        {230, 220, 50},  {220, 50, 220}, {50, 210, 210}, {240, 140, 30},
        {140, 60, 200},  {120, 220, 150}, {180, 120, 80}, {240, 180, 190},
        {90, 90, 200},   {200, 200, 140}, {100, 160, 90}, {60, 60, 60}};
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    check(f.good(), ErrorKind::data, "cannot open for write: " + path);
    f << "P6\n" << m.width << " " << m.height << "\n255\n";
    for (size_t i = 0; i < m.labels.size(); ++i) {
        uint16_t l = m.labels[i];
        const uint8_t* c = (l == m.ignore_index) ? palette[15] : palette[l % 15];
        f.write(reinterpret_cast<const char*>(c), 3);
    }
    check(!f.fail(), ErrorKind::data, "write failed: " + path);
}

}  // namespace dtx
