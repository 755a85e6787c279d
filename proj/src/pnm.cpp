#include "dis/pnm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>

#include "dis/errors.hpp"

namespace dis {

namespace {

int read_header_int(std::istream& in, const std::string& where)
{
    for (;;) {
        const int c = in.peek();
        if (c == '#') {
            std::string comment;
            std::getline(in, comment);
        } else if (c != EOF && std::isspace(c)) {
            in.get();
        } else {
            break;
        }
    }
    int value = 0;
    if (!(in >> value) || value <= 0) {
        throw FormatError(where + ": malformed header");
    }
    return value;
}

} // namespace

PnmImage read_pnm(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open " + path.string());
    }
    char magic[2] = {};
    in.read(magic, 2);
    if (!in || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6')) {
        throw FormatError(path.string() + ": not a binary PGM/PPM file");
    }
    PnmImage img;
    img.channels = magic[1] == '5' ? 1 : 3;
    img.width = read_header_int(in, path.string());
    img.height = read_header_int(in, path.string());
    const int maxval = read_header_int(in, path.string());
    if (maxval != 255) {
        throw FormatError(path.string() + ": only maxval 255 is supported, got " + std::to_string(maxval));
    }
    in.get(); // single whitespace before the raster
    img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * img.channels);
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
        throw FormatError(path.string() + ": truncated raster");
    }
    return img;
}

void write_pnm(const std::filesystem::path& path, const PnmImage& image)
{
    if (image.channels != 1 && image.channels != 3) {
        throw FormatError("PNM output needs 1 or 3 channels, got " + std::to_string(image.channels));
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw FormatError("cannot write " + path.string());
    }
    out << (image.channels == 1 ? "P5" : "P6") << '\n' << image.width << ' ' << image.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
}

std::uint8_t to_byte(double value)
{
    return static_cast<std::uint8_t>(std::clamp(std::lround((value + 1.0) * 127.5), 0L, 255L));
}

double from_byte(std::uint8_t value)
{
    return double(value) / 127.5 - 1.0;
}

} // namespace dis
