#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dis/model.hpp"

namespace dis {

/// In-memory image set with pixels in [-1, 1], layout [H, W, C] per image.
struct Dataset {
    int H = 0;
    int W = 0;
    int C = 0;
    int num_classes = 0; // 0: no labels
    std::vector<std::vector<float>> images;
    std::vector<int> labels;

    std::size_t size() const { return images.size(); }
};

/// Builtin "two-gaussians-8x8": 8x8x1 blobs, sigma 1.25, class 0 centred at
/// (2, 2), class 1 at (5, 5), centres jittered uniformly by +-0.5. Classes
/// alternate by index.
Dataset make_two_gaussians(std::size_t count, std::uint64_t seed);

inline constexpr double kBlobSigma = 1.25;
inline constexpr double kBlobJitter = 0.5;
inline constexpr double kBlobCentre[2] = {2.0, 5.0};

/// Builtin name or a directory holding PGM/PPM files plus `index.txt` lines
/// of `filename [class]`.
Dataset load_dataset(const std::string& source, std::size_t builtin_count, std::uint64_t seed);

/// Throws ConfigError when the images do not fit the model geometry/classes.
void check_dataset(const Dataset& data, const ModelConfig& config);

struct Batch {
    std::vector<float> pixels; // [B, H, W, C]
    std::vector<int> labels;   // empty when unlabelled
    std::vector<std::size_t> indices;
};

/// Reshuffles each epoch from its own stream; optional horizontal flips.
class BatchSampler {
public:
    BatchSampler(const Dataset& data, std::uint64_t seed, bool hflip);
    Batch next(int batch_size);
    std::string serialize() const;
    void deserialize(const std::string& text);

private:
    void reshuffle();

    const Dataset* data_;
    Rng rng_;
    bool hflip_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

/// Mean brightness ((x + 1) / 2) of the top-left and bottom-right quadrants.
struct QuadrantEnergy {
    double top_left = 0;
    double bottom_right = 0;
};
QuadrantEnergy quadrant_energy(const std::vector<float>& image, int height, int width, int channels);

} // namespace dis
