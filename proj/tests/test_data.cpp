#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "splitens/data.hpp"

using namespace splitens;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("splitens_test_" + std::to_string(::getpid()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("blobs: shape, labels, determinism") {
    BlobsCfg cfg;
    cfg.classes = 4;
    cfg.per_class = 10;
    cfg.height = cfg.width = 12;
    cfg.seed = 5;
    auto a = gen_blobs(cfg);
    CHECK(a.size() == 40);
    CHECK(a.classes == 4);
    CHECK(a.shape() == Shape{1, 12, 12});
    for (int i = 0; i < a.size(); ++i) CHECK(a.labels[i] == i / 10);
    for (double v : a.images.data) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    auto b = gen_blobs(cfg);
    CHECK(a.images.data == b.images.data);
    cfg.seed = 6;
    auto c = gen_blobs(cfg);
    CHECK(a.images.data != c.images.data);
    CHECK(a.mean_per_class_count() == 10);
}

TEST_CASE("blob classes occupy distinct image regions") {
    BlobsCfg cfg;
    cfg.classes = 4;
    cfg.per_class = 30;
    cfg.noise = 0.0;
    cfg.center_jitter = 0.0;
    auto ds = gen_blobs(cfg);
    // mean brightest pixel per class must differ across classes
    std::vector<int> argmax_by_class(4, -1);
    for (int cls = 0; cls < 4; ++cls) {
        const double* img = ds.images.sample(cls * 30);
        int best = 0;
        for (int j = 1; j < 256; ++j)
            if (img[j] > img[best]) best = j;
        argmax_by_class[cls] = best;
    }
    for (int a = 0; a < 4; ++a)
        for (int b = a + 1; b < 4; ++b) CHECK(argmax_by_class[a] != argmax_by_class[b]);
}

TEST_CASE("blobs OOD cluster sits apart and is unlabeled") {
    BlobsCfg cfg;
    cfg.classes = 8;
    cfg.per_class = 5;
    auto ood = gen_blobs_ood(cfg, 20);
    CHECK(ood.size() == 20);
    for (int y : ood.labels) CHECK(y == -1);
    CHECK(ood.shape() == Shape{1, 16, 16});
}

TEST_CASE("flat dataset files round trip") {
    TempDir tmp;
    BlobsCfg cfg;
    cfg.classes = 3;
    cfg.per_class = 4;
    cfg.height = cfg.width = 8;
    auto ds = gen_blobs(cfg);
    save_dataset(ds, tmp.file("ds.bin"));
    auto back = load_dataset(tmp.file("ds.bin"));
    CHECK(back.size() == ds.size());
    CHECK(back.classes == ds.classes);
    CHECK(back.labels == ds.labels);
    // float32 storage: equal to float precision
    for (size_t i = 0; i < ds.images.size(); ++i)
        CHECK(back.images.data[i] == doctest::Approx(ds.images.data[i]).epsilon(1e-6));
    CHECK_THROWS_AS(load_dataset(tmp.file("missing.bin")), std::runtime_error);
}

TEST_CASE("cifar-style binary records parse") {
    TempDir tmp;
    // two 2x2 RGB records, label byte first
    std::ofstream f(tmp.file("batch.bin"), std::ios::binary);
    for (int rec = 0; rec < 2; ++rec) {
        unsigned char label = static_cast<unsigned char>(rec + 1);
        f.put(static_cast<char>(label));
        for (int j = 0; j < 12; ++j) f.put(static_cast<char>(rec * 100 + j));
    }
    f.close();
    auto ds = load_cifar_bin({tmp.file("batch.bin")}, 10, 3, 2, 2, 1);
    CHECK(ds.size() == 2);
    CHECK(ds.labels == std::vector<int>{1, 2});
    CHECK(ds.images.at(0, 0, 0, 0) == doctest::Approx(0.0));
    CHECK(ds.images.at(1, 0, 0, 1) == doctest::Approx(101.0 / 255.0));
    CHECK_THROWS_AS(load_cifar_bin({tmp.file("nope.bin")}, 10, 3, 2, 2, 1),
                    std::runtime_error);
}

TEST_CASE("image directory with a labels csv") {
    TempDir tmp;
    // 2x2 grayscale PGM, maxval 255
    {
        std::ofstream f(tmp.file("img0.pgm"), std::ios::binary);
        f << "P5\n2 2\n255\n";
        const unsigned char px[4] = {0, 64, 128, 255};
        f.write(reinterpret_cast<const char*>(px), 4);
    }
    {
        std::ofstream f(tmp.file("img1.pgm"), std::ios::binary);
        f << "P5\n# a comment\n2 2\n255\n";
        const unsigned char px[4] = {255, 255, 0, 0};
        f.write(reinterpret_cast<const char*>(px), 4);
    }
    {
        std::ofstream f(tmp.file("labels.csv"));
        f << "img0.pgm,0\nimg1.pgm,3\n";
    }
    auto ds = load_image_dir(tmp.path.string(), tmp.file("labels.csv"));
    CHECK(ds.size() == 2);
    CHECK(ds.classes == 4);
    CHECK(ds.labels == std::vector<int>{0, 3});
    CHECK(ds.images.at(0, 0, 0, 1) == doctest::Approx(64.0 / 255.0));
    CHECK(ds.images.at(1, 0, 0, 0) == doctest::Approx(1.0));
}

TEST_CASE("subset picks rows in order") {
    BlobsCfg cfg;
    cfg.classes = 2;
    cfg.per_class = 5;
    cfg.height = cfg.width = 8;
    auto ds = gen_blobs(cfg);
    auto sub = subset(ds, {7, 0, 3});
    CHECK(sub.size() == 3);
    CHECK(sub.labels == std::vector<int>{1, 0, 0});
    for (int j = 0; j < 64; ++j) CHECK(sub.images.sample(0)[j] == ds.images.sample(7)[j]);
    CHECK_THROWS_AS(subset(ds, {99}), std::invalid_argument);
}

TEST_CASE("mean per-class count ignores unlabeled rows") {
    Dataset ds;
    ds.images = Tensor(6, 1, 1, 1);
    ds.labels = {0, 0, 0, 1, -1, -1};
    ds.classes = 2;
    CHECK(ds.mean_per_class_count() == 2);  // (3 + 1) / 2
}
