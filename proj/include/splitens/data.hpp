#pragma once

#include <string>
#include <vector>

#include "splitens/tensor.hpp"

namespace splitens {

// In-memory image dataset, pixel values in [0, 1]. label -1 marks unlabeled
// OOD-only data.
struct Dataset {
    Tensor images;  // [count, c, h, w]
    std::vector<int> labels;
    int classes = 0;

    int size() const { return images.n; }
    Shape shape() const { return images.shape(); }

    // Mean per-class sample count over labeled data (rounded); the n of the
    // class-balance weights.
    int mean_per_class_count() const;
};

// Synthetic Gaussian-blob imagery: each class is a bright bump at a
// class-specific point on a circle, with jittered position, amplitude, and
// pixel noise. An optional extra cluster at the image center (label -1)
// serves as held-out OOD.
struct BlobsCfg {
    int classes = 8;
    int per_class = 500;
    int height = 16;
    int width = 16;
    int channels = 1;
    double blob_sigma = 2.0;
    double center_jitter = 1.0;
    double amplitude_jitter = 0.2;
    double noise = 0.25;
    double ring_radius_frac = 0.28;  // class-circle radius as a fraction of min(h,w)
    // held-out cluster placement: image center by default, or on the class
    // ring at this angle (degrees) when >= 0 — an OOD cluster between two
    // ID classes is much harder to reject than the center one
    double ood_angle_deg = -1.0;
    uint64_t seed = 0;
};

Dataset gen_blobs(const BlobsCfg& cfg);
// The held-out center cluster, same rendering parameters.
Dataset gen_blobs_ood(const BlobsCfg& cfg, int count);

// CIFAR-style binary archives: per record `label_bytes` label bytes
// (the last one is used) followed by c*h*w uint8 pixels, channel-major.
Dataset load_cifar_bin(const std::vector<std::string>& paths, int classes, int channels,
                       int height, int width, int label_bytes = 1);

// Directory of binary PGM (P5) / PPM (P6) images plus a labels CSV with
// lines "filename,label".
Dataset load_image_dir(const std::string& dir, const std::string& labels_csv);

// Flat binary dataset format (magic, JSON header line, f32 pixels, i32
// labels). Written by the OOD generator CLI and re-ingestable everywhere a
// dataset is accepted.
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

// Deterministic train/eval index split or subsetting helpers.
Dataset subset(const Dataset& ds, const std::vector<int>& indices);

}  // namespace splitens
