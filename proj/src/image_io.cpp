#include "coopgen/image_io.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

namespace coopgen {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

ImageU8 read_png(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng initialization failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("undecodable PNG: " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    png_set_strip_16(png);
    png_set_packing(png);
    png_set_expand(png);
    png_set_strip_alpha(png);
    const int color = png_get_color_type(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    png_read_update_info(png, info);

    ImageU8 img;
    img.width = static_cast<int>(png_get_image_width(png, info));
    img.height = static_cast<int>(png_get_image_height(png, info));
    img.channels = static_cast<int>(png_get_channels(png, info));
    if (img.channels != 1 && img.channels != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("unsupported PNG channel count in " + path);
    }
    img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * img.channels);
    std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
    for (int y = 0; y < img.height; ++y)
        rows[static_cast<std::size_t>(y)] =
            img.pixels.data() + static_cast<std::size_t>(y) * img.width * img.channels;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

ImageU8 read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::string magic;
    in >> magic;
    if (magic != "P5") throw IoError("not a binary PGM: " + path);
    auto next_int = [&]() {
        int v;
        // skip whitespace and '#' comment lines
        for (;;) {
            int ch = in.peek();
            if (ch == '#') {
                std::string line;
                std::getline(in, line);
            } else if (std::isspace(ch)) {
                in.get();
            } else {
                break;
            }
        }
        if (!(in >> v)) throw IoError("truncated PGM header: " + path);
        return v;
    };
    ImageU8 img;
    img.width = next_int();
    img.height = next_int();
    const int maxval = next_int();
    if (maxval != 255) throw IoError("PGM maxval must be 255: " + path);
    in.get();  // single whitespace after the header
    img.channels = 1;
    img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.pixels.size()))
        throw IoError("truncated PGM payload: " + path);
    return img;
}

}  // namespace

ImageU8 read_image(const std::string& path) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) throw IoError("cannot open " + path);
    unsigned char magic[2] = {0, 0};
    probe.read(reinterpret_cast<char*>(magic), 2);
    probe.close();
    if (magic[0] == 0x89 && magic[1] == 'P') return read_png(path);
    if (magic[0] == 'P' && magic[1] == '5') return read_pgm(path);
    throw IoError("unrecognized image format (PNG or binary PGM expected): " + path);
}

void write_png(const std::string& path, const ImageU8& img) {
    if (img.channels != 1 && img.channels != 3) throw IoError("write_png: 1 or 3 channels only");
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot write " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng initialization failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("PNG write failed: " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
    for (int y = 0; y < img.height; ++y)
        rows[static_cast<std::size_t>(y)] = const_cast<png_bytep>(
            img.pixels.data() + static_cast<std::size_t>(y) * img.width * img.channels);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

void write_pgm(const std::string& path, const ImageU8& img) {
    if (img.channels != 1) throw IoError("write_pgm: grayscale only");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << "P5\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (!out) throw IoError("PGM write failed: " + path);
}

void write_image(const std::string& path, const ImageU8& img) {
    if (path.size() >= 4 && path.compare(path.size() - 4, 4, ".pgm") == 0)
        write_pgm(path, img);
    else
        write_png(path, img);
}

std::vector<ManifestPair> read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest " + path);
    std::vector<ManifestPair> pairs;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::istringstream is(line);
        ManifestPair p;
        if (!(is >> p.condition)) continue;  // blank line
        if (!(is >> p.target))
            throw IoError("manifest line " + std::to_string(lineno) + " needs two paths: " + path);
        std::string extra;
        if (is >> extra) throw IoError("manifest line " + std::to_string(lineno) + " has trailing fields: " + path);
        pairs.push_back(std::move(p));
    }
    return pairs;
}

}  // namespace coopgen
