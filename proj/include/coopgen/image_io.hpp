#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "coopgen/data.hpp"
#include "coopgen/errors.hpp"
#include "coopgen/tensor.hpp"

namespace coopgen {

// 8-bit interleaved image buffer, 1 (gray) or 3 (rgb) channels.
struct ImageU8 {
    int width = 0, height = 0, channels = 0;
    std::vector<std::uint8_t> pixels;

    std::uint8_t& at(int y, int x, int c) {
        return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
    }
    std::uint8_t at(int y, int x, int c) const {
        return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
    }
};

// PNG (8-bit gray/rgb) or binary PGM, chosen by extension on write and by
// file magic on read.
ImageU8 read_image(const std::string& path);
void write_image(const std::string& path, const ImageU8& img);
void write_png(const std::string& path, const ImageU8& img);
void write_pgm(const std::string& path, const ImageU8& img);

// planar [c,h,w] tensor in [-1,1] <-> interleaved bytes
template <typename T>
TensorT<T> image_to_tensor(const ImageU8& img) {
    TensorT<T> t({img.channels, img.height, img.width});
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                t[(static_cast<std::int64_t>(c) * img.height + y) * img.width + x] =
                    normalize_u8<T>(img.at(y, x, c));
    return t;
}

template <typename T>
ImageU8 tensor_to_image(const TensorT<T>& t) {
    if (t.rank() != 3 || (t.dim(0) != 1 && t.dim(0) != 3))
        throw ShapeError("tensor_to_image: expected [1|3,h,w], got " + shape_str(t.shape()));
    ImageU8 img;
    img.channels = static_cast<int>(t.dim(0));
    img.height = static_cast<int>(t.dim(1));
    img.width = static_cast<int>(t.dim(2));
    img.pixels.resize(static_cast<std::size_t>(img.channels) * img.height * img.width);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                img.at(y, x, c) =
                    denormalize_u8(t[(static_cast<std::int64_t>(c) * img.height + y) * img.width + x]);
    return img;
}

// Tiles a batch [n,c,h,w] into a rows x cols grid image (row-major order).
template <typename T>
ImageU8 tile_grid(const TensorT<T>& batch, std::int64_t rows, std::int64_t cols) {
    if (batch.rank() != 4) throw ShapeError("tile_grid: expected [n,c,h,w]");
    if (rows * cols < batch.dim(0)) throw ShapeError("tile_grid: grid too small for the batch");
    const std::int64_t c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
    TensorT<T> canvas({c, rows * h, cols * w});
    canvas.fill(T(-1));
    for (std::int64_t i = 0; i < batch.dim(0); ++i) {
        const std::int64_t gy = (i / cols) * h, gx = (i % cols) * w;
        for (std::int64_t ci = 0; ci < c; ++ci)
            for (std::int64_t y = 0; y < h; ++y)
                for (std::int64_t x = 0; x < w; ++x)
                    canvas[(ci * rows * h + gy + y) * cols * w + gx + x] = batch.at4(i, ci, y, x);
    }
    return tensor_to_image(canvas);
}

struct ManifestPair {
    std::string condition;
    std::string target;
};

std::vector<ManifestPair> read_manifest(const std::string& path);

// Loads aligned (condition, target) image pairs listed in the manifest,
// normalized to [-1,1] and shape-validated. An empty manifest yields an
// empty dataset.
template <typename T>
CondDataset<T> load_paired_images(const std::string& cond_dir, const std::string& target_dir,
                                  const std::string& manifest_path) {
    auto pairs = read_manifest(manifest_path);
    CondDataset<T> ds;
    ds.cond_onehot = false;
    if (pairs.empty()) return ds;

    const std::int64_t n = static_cast<std::int64_t>(pairs.size());
    for (std::int64_t i = 0; i < n; ++i) {
        const std::string cpath = cond_dir + "/" + pairs[static_cast<std::size_t>(i)].condition;
        const std::string tpath = target_dir + "/" + pairs[static_cast<std::size_t>(i)].target;
        ImageU8 cimg = read_image(cpath);
        ImageU8 timg = read_image(tpath);
        if (cimg.width != timg.width || cimg.height != timg.height)
            throw IoError("paired images disagree in size: " + cpath + " vs " + tpath);
        auto ct = image_to_tensor<T>(cimg);
        auto tt = image_to_tensor<T>(timg);
        if (i == 0) {
            Shape cs = ct.shape(), ts = tt.shape();
            cs.insert(cs.begin(), n);
            ts.insert(ts.begin(), n);
            ds.conditions = TensorT<T>(cs);
            ds.targets = TensorT<T>(ts);
        }
        if (ct.numel() != ds.conditions.numel() / n || tt.numel() != ds.targets.numel() / n)
            throw IoError("image shape inconsistent with the first pair: " + cpath + " / " + tpath);
        std::copy_n(ct.data(), ct.numel(), ds.conditions.data() + i * ct.numel());
        std::copy_n(tt.data(), tt.numel(), ds.targets.data() + i * tt.numel());
    }
    return ds;
}

}  // namespace coopgen
