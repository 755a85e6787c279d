#include "dis/dataset.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "dis/pnm.hpp"

namespace dis {

Dataset make_two_gaussians(std::size_t count, std::uint64_t seed)
{
    Dataset data;
    data.H = 8;
    data.W = 8;
    data.C = 1;
    data.num_classes = 2;
    Rng rng(seed, 3);
    for (std::size_t k = 0; k < count; ++k) {
        const int cls = static_cast<int>(k % 2);
        const double cy = kBlobCentre[cls] + kBlobJitter * (2.0 * rng.uniform() - 1.0);
        const double cx = kBlobCentre[cls] + kBlobJitter * (2.0 * rng.uniform() - 1.0);
        std::vector<float> img(64);
        for (int y = 0; y < 8; ++y) {
            for (int x = 0; x < 8; ++x) {
                const double r2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                img[static_cast<std::size_t>(y * 8 + x)] =
                    static_cast<float>(2.0 * std::exp(-r2 / (2.0 * kBlobSigma * kBlobSigma)) - 1.0);
            }
        }
        data.images.push_back(std::move(img));
        data.labels.push_back(cls);
    }
    return data;
}

namespace {

Dataset load_directory(const std::filesystem::path& dir)
{
    std::ifstream index(dir / "index.txt");
    if (!index) {
        throw ConfigError("dataset " + dir.string() + " has no readable index.txt");
    }
    Dataset data;
    bool labelled = false;
    std::string line;
    int number = 0;
    while (std::getline(index, line)) {
        ++number;
        std::istringstream fields(line);
        std::string file;
        if (!(fields >> file) || file[0] == '#') {
            continue;
        }
        int cls = -1;
        const bool has_label = static_cast<bool>(fields >> cls);
        if (data.images.empty()) {
            labelled = has_label;
        } else if (has_label != labelled) {
            throw ConfigError("index.txt line " + std::to_string(number) + ": every entry needs a class or none does");
        }
        if (has_label && cls < 0) {
            throw ConfigError("index.txt line " + std::to_string(number) + ": negative class id");
        }
        const PnmImage img = read_pnm(dir / file);
        if (data.images.empty()) {
            data.H = img.height;
            data.W = img.width;
            data.C = img.channels;
        } else if (img.height != data.H || img.width != data.W || img.channels != data.C) {
            throw ConfigError(file + ": geometry differs from the first image");
        }
        std::vector<float> pixels(img.pixels.size());
        for (std::size_t i = 0; i < pixels.size(); ++i) {
            pixels[i] = static_cast<float>(from_byte(img.pixels[i]));
        }
        data.images.push_back(std::move(pixels));
        if (has_label) {
            data.labels.push_back(cls);
            data.num_classes = std::max(data.num_classes, cls + 1);
        }
    }
    if (data.images.empty()) {
        throw ConfigError("dataset " + dir.string() + " lists no images");
    }
    return data;
}

} // namespace

Dataset load_dataset(const std::string& source, std::size_t builtin_count, std::uint64_t seed)
{
    if (source == "two-gaussians-8x8") {
        return make_two_gaussians(builtin_count, seed);
    }
    if (std::filesystem::is_directory(source)) {
        return load_directory(source);
    }
    throw ConfigError("unknown dataset '" + source + "' (builtin: two-gaussians-8x8, or a directory)");
}

void check_dataset(const Dataset& data, const ModelConfig& config)
{
    if (data.H != config.H || data.W != config.W || data.C != config.C) {
        throw ConfigError("dataset images are " + std::to_string(data.H) + "x" + std::to_string(data.W) + "x" +
                          std::to_string(data.C) + " but the model expects " + std::to_string(config.H) + "x" +
                          std::to_string(config.W) + "x" + std::to_string(config.C));
    }
    if (config.num_classes > 0 && data.num_classes > config.num_classes) {
        throw ConfigError("dataset has " + std::to_string(data.num_classes) + " classes, model num_classes is " +
                          std::to_string(config.num_classes));
    }
    if (config.num_classes > 0 && data.labels.empty()) {
        throw ConfigError("conditional model needs a labelled dataset");
    }
}

BatchSampler::BatchSampler(const Dataset& data, std::uint64_t seed, bool hflip)
    : data_(&data), rng_(seed, 1), hflip_(hflip)
{
    if (data.size() == 0) {
        throw ConfigError("empty dataset");
    }
    reshuffle();
}

void BatchSampler::reshuffle()
{
    order_.resize(data_->size());
    for (std::size_t i = 0; i < order_.size(); ++i) {
        order_[i] = i;
    }
    for (std::size_t i = order_.size() - 1; i > 0; --i) {
        std::swap(order_[i], order_[static_cast<std::size_t>(rng_.uniform_int(0, static_cast<int>(i)))]);
    }
    cursor_ = 0;
}

Batch BatchSampler::next(int batch_size)
{
    const auto& d = *data_;
    Batch batch;
    for (int b = 0; b < batch_size; ++b) {
        if (cursor_ == order_.size()) {
            reshuffle();
        }
        const std::size_t k = order_[cursor_++];
        batch.indices.push_back(k);
        const auto& img = d.images[k];
        const bool flip = hflip_ && rng_.uniform() < 0.5;
        for (int y = 0; y < d.H; ++y) {
            for (int x = 0; x < d.W; ++x) {
                const int sx = flip ? d.W - 1 - x : x;
                for (int c = 0; c < d.C; ++c) {
                    batch.pixels.push_back(img[static_cast<std::size_t>((y * d.W + sx) * d.C + c)]);
                }
            }
        }
        if (!d.labels.empty()) {
            batch.labels.push_back(d.labels[k]);
        }
    }
    return batch;
}

std::string BatchSampler::serialize() const
{
    std::ostringstream out;
    out << rng_.serialize() << '\n' << cursor_ << ' ' << order_.size();
    for (std::size_t k : order_) {
        out << ' ' << k;
    }
    return out.str();
}

void BatchSampler::deserialize(const std::string& text)
{
    std::istringstream in(text);
    std::string rng_line;
    std::getline(in, rng_line);
    rng_.deserialize(rng_line);
    std::size_t count = 0;
    in >> cursor_ >> count;
    order_.resize(count);
    for (auto& k : order_) {
        in >> k;
    }
    if (!in || count != data_->size() || cursor_ > count) {
        throw FormatError("sampler state does not match the dataset");
    }
}

QuadrantEnergy quadrant_energy(const std::vector<float>& image, int height, int width, int channels)
{
    QuadrantEnergy e;
    const int hh = height / 2;
    const int hw = width / 2;
    for (int y = 0; y < hh; ++y) {
        for (int x = 0; x < hw; ++x) {
            for (int c = 0; c < channels; ++c) {
                const auto tl = static_cast<std::size_t>((y * width + x) * channels + c);
                const auto br = static_cast<std::size_t>(((y + height - hh) * width + x + width - hw) * channels + c);
                e.top_left += (image[tl] + 1.0) / 2.0;
                e.bottom_right += (image[br] + 1.0) / 2.0;
            }
        }
    }
    const double n = double(hh) * hw * channels;
    e.top_left /= n;
    e.bottom_right /= n;
    return e;
}

} // namespace dis
