#include "splitens/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "splitens/rng.hpp"

namespace splitens {

namespace {
void check_arg(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

void check_io(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}
}  // namespace

int Dataset::mean_per_class_count() const {
    std::map<int, int> counts;
    for (int y : labels)
        if (y >= 0) counts[y]++;
    if (counts.empty()) return 1;
    long total = 0;
    for (auto& [cls, c] : counts) total += c;
    return std::max(1, static_cast<int>(std::lround(
                           static_cast<double>(total) / static_cast<double>(counts.size()))));
}

namespace {

struct BlobRenderer {
    const BlobsCfg& cfg;
    Rng rng;

    explicit BlobRenderer(const BlobsCfg& c, uint64_t stream) : cfg(c), rng(mix_seed(c.seed, stream)) {}

    void render(double cx, double cy, double* img) {
        const double jx = rng.normal(0.0, cfg.center_jitter);
        const double jy = rng.normal(0.0, cfg.center_jitter);
        const double amp = 1.0 + rng.normal(0.0, cfg.amplitude_jitter);
        const double inv2s2 = 1.0 / (2.0 * cfg.blob_sigma * cfg.blob_sigma);
        for (int c = 0; c < cfg.channels; ++c) {
            for (int y = 0; y < cfg.height; ++y) {
                for (int x = 0; x < cfg.width; ++x) {
                    const double dx = x - (cx + jx);
                    const double dy = y - (cy + jy);
                    double v = amp * std::exp(-(dx * dx + dy * dy) * inv2s2);
                    v += rng.normal(0.0, cfg.noise);
                    img[(static_cast<size_t>(c) * cfg.height + y) * cfg.width + x] =
                        std::clamp(v, 0.0, 1.0);
                }
            }
        }
    }

    std::pair<double, double> class_center(int cls) const {
        const double r = cfg.ring_radius_frac * std::min(cfg.height, cfg.width);
        const double theta = 2.0 * 3.14159265358979323846 * cls / cfg.classes;
        return {0.5 * (cfg.width - 1) + r * std::cos(theta),
                0.5 * (cfg.height - 1) + r * std::sin(theta)};
    }
};

}  // namespace

Dataset gen_blobs(const BlobsCfg& cfg) {
    check_arg(cfg.classes >= 1 && cfg.per_class >= 1, "gen_blobs: bad counts");
    Dataset ds;
    ds.classes = cfg.classes;
    ds.images = Tensor(cfg.classes * cfg.per_class, cfg.channels, cfg.height, cfg.width);
    ds.labels.resize(ds.images.n);
    BlobRenderer r(cfg, 0x1d);
    int row = 0;
    for (int cls = 0; cls < cfg.classes; ++cls) {
        auto [cx, cy] = r.class_center(cls);
        for (int s = 0; s < cfg.per_class; ++s, ++row) {
            r.render(cx, cy, ds.images.sample(row));
            ds.labels[row] = cls;
        }
    }
    return ds;
}

Dataset gen_blobs_ood(const BlobsCfg& cfg, int count) {
    check_arg(count >= 1, "gen_blobs_ood: bad count");
    Dataset ds;
    ds.classes = 0;
    ds.images = Tensor(count, cfg.channels, cfg.height, cfg.width);
    ds.labels.assign(count, -1);
    BlobRenderer r(cfg, 0x0d);
    double cx = 0.5 * (cfg.width - 1);
    double cy = 0.5 * (cfg.height - 1);
    if (cfg.ood_angle_deg >= 0.0) {
        const double rad = cfg.ood_angle_deg * 3.14159265358979323846 / 180.0;
        const double rr = cfg.ring_radius_frac * std::min(cfg.height, cfg.width);
        cx += rr * std::cos(rad);
        cy += rr * std::sin(rad);
    }
    for (int s = 0; s < count; ++s) r.render(cx, cy, ds.images.sample(s));
    return ds;
}

Dataset load_cifar_bin(const std::vector<std::string>& paths, int classes, int channels,
                       int height, int width, int label_bytes) {
    check_arg(!paths.empty(), "load_cifar_bin: no input files");
    const size_t pixels = static_cast<size_t>(channels) * height * width;
    const size_t record = pixels + static_cast<size_t>(label_bytes);
    std::vector<unsigned char> raw;
    for (const auto& path : paths) {
        std::ifstream f(path, std::ios::binary);
        check_io(f.good(), "load_cifar_bin: cannot open " + path);
        std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)),
                                       std::istreambuf_iterator<char>());
        check_io(!buf.empty() && buf.size() % record == 0,
                 "load_cifar_bin: " + path + " is not a whole number of records");
        raw.insert(raw.end(), buf.begin(), buf.end());
    }
    const int count = static_cast<int>(raw.size() / record);
    Dataset ds;
    ds.classes = classes;
    ds.images = Tensor(count, channels, height, width);
    ds.labels.resize(count);
    for (int i = 0; i < count; ++i) {
        const unsigned char* rec = raw.data() + static_cast<size_t>(i) * record;
        ds.labels[i] = rec[label_bytes - 1];  // fine-label convention
        check_io(ds.labels[i] < classes, "load_cifar_bin: label out of range");
        double* img = ds.images.sample(i);
        for (size_t j = 0; j < pixels; ++j)
            img[j] = static_cast<double>(rec[label_bytes + j]) / 255.0;
    }
    return ds;
}

namespace {

// Minimal binary PGM/PPM reader.
Tensor read_pnm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check_io(f.good(), "read_pnm: cannot open " + path);
    std::string magic;
    f >> magic;
    check_io(magic == "P5" || magic == "P6", "read_pnm: unsupported format in " + path);
    const int channels = magic == "P5" ? 1 : 3;
    auto next_int = [&]() {
        int v;
        while (true) {
            f >> std::ws;
            if (f.peek() == '#') {
                std::string line;
                std::getline(f, line);
                continue;
            }
            f >> v;
            return v;
        }
    };
    const int w = next_int();
    const int h = next_int();
    const int maxval = next_int();
    check_io(maxval > 0 && maxval < 65536, "read_pnm: bad maxval in " + path);
    f.get();  // single whitespace before the raster
    const size_t n = static_cast<size_t>(w) * h * channels;
    std::vector<unsigned char> raw(n * (maxval > 255 ? 2 : 1));
    f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    check_io(f.gcount() == static_cast<std::streamsize>(raw.size()),
             "read_pnm: truncated raster in " + path);
    Tensor img(1, channels, h, w);
    for (int c = 0; c < channels; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const size_t j = (static_cast<size_t>(y) * w + x) * channels + c;
                double v = maxval > 255
                               ? (raw[2 * j] << 8 | raw[2 * j + 1])
                               : raw[j];
                img.at(0, c, y, x) = v / maxval;
            }
    return img;
}

}  // namespace

Dataset load_image_dir(const std::string& dir, const std::string& labels_csv) {
    std::ifstream f(labels_csv);
    check_io(f.good(), "load_image_dir: cannot open " + labels_csv);
    std::vector<std::pair<std::string, int>> entries;
    std::string line;
    int max_label = -1;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto comma = line.find(',');
        check_io(comma != std::string::npos, "load_image_dir: bad csv line: " + line);
        const std::string name = line.substr(0, comma);
        const int label = std::stoi(line.substr(comma + 1));
        entries.emplace_back(name, label);
        max_label = std::max(max_label, label);
    }
    check_io(!entries.empty(), "load_image_dir: empty label file");

    Dataset ds;
    ds.classes = max_label + 1;
    for (size_t i = 0; i < entries.size(); ++i) {
        Tensor img = read_pnm(dir + "/" + entries[i].first);
        if (i == 0) {
            ds.images = Tensor(static_cast<int>(entries.size()), img.c, img.h, img.w);
        }
        check_io(img.c == ds.images.c && img.h == ds.images.h && img.w == ds.images.w,
                 "load_image_dir: inconsistent image dimensions at " + entries[i].first);
        std::copy_n(img.ptr(), img.size(), ds.images.sample(static_cast<int>(i)));
        ds.labels.push_back(entries[i].second);
    }
    return ds;
}

static constexpr char kDatasetMagic[] = "SEDS1\n";

void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    check_io(f.good(), "save_dataset: cannot open " + path);
    f.write(kDatasetMagic, sizeof(kDatasetMagic) - 1);
    nlohmann::ordered_json header{{"count", ds.images.n}, {"c", ds.images.c},
                                  {"h", ds.images.h},     {"w", ds.images.w},
                                  {"classes", ds.classes}};
    const std::string hs = header.dump();
    f << hs << '\n';
    std::vector<float> pix(ds.images.size());
    for (size_t i = 0; i < pix.size(); ++i) pix[i] = static_cast<float>(ds.images.data[i]);
    f.write(reinterpret_cast<const char*>(pix.data()),
            static_cast<std::streamsize>(pix.size() * sizeof(float)));
    std::vector<int32_t> labels(ds.labels.begin(), ds.labels.end());
    f.write(reinterpret_cast<const char*>(labels.data()),
            static_cast<std::streamsize>(labels.size() * sizeof(int32_t)));
    check_io(f.good(), "save_dataset: write failed for " + path);
}

Dataset load_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check_io(f.good(), "load_dataset: cannot open " + path);
    char magic[sizeof(kDatasetMagic) - 1];
    f.read(magic, sizeof(magic));
    check_io(f.gcount() == sizeof(magic) && std::memcmp(magic, kDatasetMagic, sizeof(magic)) == 0,
             "load_dataset: bad magic in " + path);
    std::string header_line;
    std::getline(f, header_line);
    const auto header = nlohmann::json::parse(header_line);
    Dataset ds;
    ds.classes = header.at("classes").get<int>();
    ds.images = Tensor(header.at("count").get<int>(), header.at("c").get<int>(),
                       header.at("h").get<int>(), header.at("w").get<int>());
    std::vector<float> pix(ds.images.size());
    f.read(reinterpret_cast<char*>(pix.data()),
           static_cast<std::streamsize>(pix.size() * sizeof(float)));
    check_io(f.gcount() == static_cast<std::streamsize>(pix.size() * sizeof(float)),
             "load_dataset: truncated pixel data in " + path);
    for (size_t i = 0; i < pix.size(); ++i) ds.images.data[i] = pix[i];
    std::vector<int32_t> labels(ds.images.n);
    f.read(reinterpret_cast<char*>(labels.data()),
           static_cast<std::streamsize>(labels.size() * sizeof(int32_t)));
    check_io(f.gcount() == static_cast<std::streamsize>(labels.size() * sizeof(int32_t)),
             "load_dataset: truncated labels in " + path);
    ds.labels.assign(labels.begin(), labels.end());
    return ds;
}

Dataset subset(const Dataset& ds, const std::vector<int>& indices) {
    Dataset out;
    out.classes = ds.classes;
    out.images = Tensor(static_cast<int>(indices.size()), ds.images.c, ds.images.h, ds.images.w);
    out.labels.reserve(indices.size());
    for (size_t i = 0; i < indices.size(); ++i) {
        check_arg(indices[i] >= 0 && indices[i] < ds.size(), "subset: index out of range");
        std::copy_n(ds.images.sample(indices[i]), out.images.shape().features() * 1,
                    out.images.sample(static_cast<int>(i)));
        out.labels.push_back(ds.labels[indices[i]]);
    }
    return out;
}

}  // namespace splitens
