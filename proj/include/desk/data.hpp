#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "desk/rng.hpp"
#include "desk/tensor.hpp"

namespace desk {

enum class Split : uint8_t { Train, Validation, Test };

std::string split_name(Split s);
Split split_from_name(const std::string& name);

// Images with integer class labels and per-sample split tags. Labels are
// dense (0..K-1); label_names maps a dense label back to its original value
// so derived sets produced by split_classes keep their provenance.
struct LabeledImageSet {
    std::vector<Tensor> images;
    std::vector<int> labels;
    std::vector<Split> splits;
    std::vector<int> label_names;  // dense label -> original label value
    std::vector<int> source_ids;   // original dataset index per sample

    size_t size() const { return images.size(); }
    int num_classes() const { return static_cast<int>(label_names.size()); }
    int original_label(size_t i) const { return label_names[static_cast<size_t>(labels[i])]; }
    std::vector<int> indices_of(Split s) const;
    std::vector<int> image_shape() const;
    void validate() const;
};

// IDX binary ingestion: big-endian magic 0x00000803 (images) and 0x00000801
// (labels). Pixel bytes are scaled to [0,1]; image shape becomes H x W x 1.
LabeledImageSet load_idx(const std::string& images_path, const std::string& labels_path);

// Byte-level IDX writers (fixtures and the synthetic dataset share these).
void write_idx_images(const std::string& path, const std::vector<std::vector<uint8_t>>& images,
                      int height, int width);
void write_idx_labels(const std::string& path, const std::vector<uint8_t>& labels);

// Center the images in a zero-padded target_h x target_w frame.
LabeledImageSet standardize(const LabeledImageSet& set, int target_h, int target_w);

struct ClassSplit {
    LabeledImageSet target;
    LabeledImageSet nontarget;
};

// Class-disjoint partition by original label value. Both sides get densely
// re-indexed labels; label_names records the mapping.
ClassSplit split_classes(const LabeledImageSet& set, const std::vector<int>& target_classes);

struct SamplePair {
    int i = 0;
    int j = 0;
    int target = 0;  // 1 iff same class
};

struct PairBatch {
    std::vector<SamplePair> pairs;
    const LabeledImageSet* provenance = nullptr;

    size_t size() const { return pairs.size(); }
    void validate() const;
};

struct PairSamplingOptions {
    bool with_replacement = true;  // duplicate pairs permitted
};

// Balanced pair sample: exactly n_pairs/2 similar and n_pairs/2 dissimilar
// ordered pairs drawn uniformly from the given split, never pairing a sample
// with itself. Deterministic under the rng.
PairBatch sample_pairs(const LabeledImageSet& set, Split split, int n_pairs, Rng& rng,
                       const PairSamplingOptions& options = {});

// Plain-text split manifest: one "index,tag" line per sample.
void write_split_manifest(const LabeledImageSet& set, const std::string& path);
void apply_split_manifest(LabeledImageSet& set, const std::string& path);

// Utility views used throughout the pipeline.
LabeledImageSet take_subset(const LabeledImageSet& set, const std::vector<int>& indices);
// Re-tags a stratified fraction of the Train samples as Validation.
void assign_validation_fraction(LabeledImageSet& set, double fraction, Rng& rng);
// Stacks the given samples into a batch tensor (B prepended to image shape).
Tensor stack_images(const LabeledImageSet& set, const std::vector<int>& indices);

}  // namespace desk
