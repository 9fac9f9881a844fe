#include "desk/data.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unordered_set>

namespace desk {

std::string split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Validation: return "validation";
        case Split::Test: return "test";
    }
    return "?";
}

Split split_from_name(const std::string& name) {
    if (name == "train") return Split::Train;
    if (name == "validation") return Split::Validation;
    if (name == "test") return Split::Test;
    throw DataError("unknown split tag '" + name + "'");
}

std::vector<int> LabeledImageSet::indices_of(Split s) const {
    std::vector<int> out;
    for (size_t i = 0; i < splits.size(); ++i)
        if (splits[i] == s) out.push_back(static_cast<int>(i));
    return out;
}

std::vector<int> LabeledImageSet::image_shape() const {
    if (images.empty()) throw DataError("image set is empty");
    return images.front().shape();
}

void LabeledImageSet::validate() const {
    if (images.size() != labels.size() || images.size() != splits.size() ||
        images.size() != source_ids.size())
        throw DataError("image/label/split/id counts disagree");
    for (size_t i = 0; i < images.size(); ++i) {
        if (!images[i].same_shape(images.front()))
            throw DataError("image " + std::to_string(i) + " has shape " +
                            shape_str(images[i].shape()) + " != " +
                            shape_str(images.front().shape()));
        if (labels[i] < 0 || labels[i] >= num_classes())
            throw DataError("label " + std::to_string(labels[i]) + " outside class universe");
    }
}

namespace {

uint32_t read_u32_be(std::istream& in, const std::string& path) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw DataError("truncated IDX header in " + path);
    return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}

void write_u32_be(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::string hex_magic(uint32_t m) {
    std::ostringstream os;
    os << "0x" << std::hex << m;
    return os.str();
}

}  // namespace

LabeledImageSet load_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream imgf(images_path, std::ios::binary);
    if (!imgf) throw DataError("cannot open " + images_path);
    uint32_t magic = read_u32_be(imgf, images_path);
    if (magic != 0x00000803u)
        throw DataError("bad image magic " + hex_magic(magic) + " (expected 0x803) in " +
                        images_path);
    uint32_t n = read_u32_be(imgf, images_path);
    uint32_t h = read_u32_be(imgf, images_path);
    uint32_t w = read_u32_be(imgf, images_path);

    std::vector<uint8_t> raw(static_cast<size_t>(n) * h * w);
    imgf.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<size_t>(imgf.gcount()) != raw.size())
        throw DataError("truncated image payload in " + images_path);

    std::ifstream labf(labels_path, std::ios::binary);
    if (!labf) throw DataError("cannot open " + labels_path);
    uint32_t lmagic = read_u32_be(labf, labels_path);
    if (lmagic != 0x00000801u)
        throw DataError("bad label magic " + hex_magic(lmagic) + " (expected 0x801) in " +
                        labels_path);
    uint32_t ln = read_u32_be(labf, labels_path);
    if (ln != n)
        throw DataError("image/label count mismatch: " + std::to_string(n) + " images in " +
                        images_path + " vs " + std::to_string(ln) + " labels in " + labels_path);
    std::vector<uint8_t> lab(ln);
    labf.read(reinterpret_cast<char*>(lab.data()), static_cast<std::streamsize>(lab.size()));
    if (static_cast<size_t>(labf.gcount()) != lab.size())
        throw DataError("truncated label payload in " + labels_path);

    LabeledImageSet set;
    set.images.reserve(n);
    set.labels.reserve(n);
    int max_label = 0;
    for (uint32_t i = 0; i < n; ++i) {
        Tensor img({static_cast<int>(h), static_cast<int>(w), 1});
        const uint8_t* src = raw.data() + static_cast<size_t>(i) * h * w;
        for (Eigen::Index p = 0; p < img.size(); ++p) img[p] = static_cast<double>(src[p]) / 255.0;
        set.images.push_back(std::move(img));
        set.labels.push_back(lab[i]);
        max_label = std::max(max_label, static_cast<int>(lab[i]));
        set.splits.push_back(Split::Train);
        set.source_ids.push_back(static_cast<int>(i));
    }
    set.label_names.resize(static_cast<size_t>(max_label) + 1);
    for (size_t c = 0; c < set.label_names.size(); ++c) set.label_names[c] = static_cast<int>(c);
    return set;
}

void write_idx_images(const std::string& path, const std::vector<std::vector<uint8_t>>& images,
                      int height, int width) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    write_u32_be(out, 0x00000803u);
    write_u32_be(out, static_cast<uint32_t>(images.size()));
    write_u32_be(out, static_cast<uint32_t>(height));
    write_u32_be(out, static_cast<uint32_t>(width));
    for (const auto& img : images) {
        if (img.size() != static_cast<size_t>(height) * width)
            throw DataError("image byte count does not match dimensions in " + path);
        out.write(reinterpret_cast<const char*>(img.data()),
                  static_cast<std::streamsize>(img.size()));
    }
}

void write_idx_labels(const std::string& path, const std::vector<uint8_t>& labels) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    write_u32_be(out, 0x00000801u);
    write_u32_be(out, static_cast<uint32_t>(labels.size()));
    out.write(reinterpret_cast<const char*>(labels.data()),
              static_cast<std::streamsize>(labels.size()));
}

LabeledImageSet standardize(const LabeledImageSet& set, int target_h, int target_w) {
    auto shape = set.image_shape();
    const int h = shape[0], w = shape[1], c = shape[2];
    if (target_h < h || target_w < w)
        throw ConfigError("standardize cannot shrink " + shape_str(shape) + " to " +
                          std::to_string(target_h) + "x" + std::to_string(target_w));
    if (target_h == h && target_w == w) return set;

    const int off_y = (target_h - h) / 2;
    const int off_x = (target_w - w) / 2;
    LabeledImageSet out = set;
    for (size_t n = 0; n < set.images.size(); ++n) {
        Tensor padded({target_h, target_w, c});
        const Tensor& src = set.images[n];
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int ch = 0; ch < c; ++ch)
                    padded.at(y + off_y, x + off_x, ch) = src.at(y, x, ch);
        out.images[n] = std::move(padded);
    }
    return out;
}

ClassSplit split_classes(const LabeledImageSet& set, const std::vector<int>& target_classes) {
    std::set<int> universe(set.label_names.begin(), set.label_names.end());
    std::set<int> target(target_classes.begin(), target_classes.end());
    if (target.empty()) throw ConfigError("target class list is empty");
    for (int t : target)
        if (!universe.count(t))
            throw ConfigError("target class " + std::to_string(t) + " not in class universe");
    if (target.size() == universe.size())
        throw ConfigError("target classes cover the whole universe; nothing left for non-target");

    auto build = [&](bool in_target) {
        LabeledImageSet out;
        std::vector<int> names;
        for (int name : set.label_names)
            if (target.count(name) == static_cast<size_t>(in_target ? 1 : 0)) names.push_back(name);
        std::sort(names.begin(), names.end());
        std::map<int, int> dense;
        for (size_t i = 0; i < names.size(); ++i) dense[names[i]] = static_cast<int>(i);
        out.label_names = names;
        for (size_t i = 0; i < set.size(); ++i) {
            int orig = set.original_label(i);
            auto it = dense.find(orig);
            if (it == dense.end()) continue;
            out.images.push_back(set.images[i]);
            out.labels.push_back(it->second);
            out.splits.push_back(set.splits[i]);
            out.source_ids.push_back(set.source_ids[i]);
        }
        return out;
    };

    return ClassSplit{build(true), build(false)};
}

void PairBatch::validate() const {
    if (!provenance) throw DataError("pair batch has no provenance set");
    size_t ones = 0;
    for (const auto& p : pairs) {
        if (p.i == p.j) throw DataError("pair batch contains a self pair");
        const bool same = provenance->labels[static_cast<size_t>(p.i)] ==
                          provenance->labels[static_cast<size_t>(p.j)];
        if (same != (p.target == 1)) throw DataError("pair target disagrees with labels");
        ones += static_cast<size_t>(p.target);
    }
    if (ones * 2 != pairs.size()) throw DataError("pair batch is not balanced");
}

PairBatch sample_pairs(const LabeledImageSet& set, Split split, int n_pairs, Rng& rng,
                       const PairSamplingOptions& options) {
    if (n_pairs <= 0 || n_pairs % 2 != 0)
        throw ConfigError("n_pairs must be even and positive, got " + std::to_string(n_pairs));
    std::vector<int> idx = set.indices_of(split);
    if (idx.size() < 2)
        throw DataError("split '" + split_name(split) + "' has fewer than 2 samples");

    // Members per class within the split.
    std::map<int, std::vector<int>> by_class;
    for (int i : idx) by_class[set.labels[static_cast<size_t>(i)]].push_back(i);

    // Cumulative weights over ordered same-class pairs: n_c * (n_c - 1).
    std::vector<const std::vector<int>*> classes;
    std::vector<double> cum;
    double total = 0;
    for (const auto& [label, members] : by_class) {
        (void)label;
        double wgt = static_cast<double>(members.size()) * (members.size() - 1.0);
        if (wgt > 0) {
            classes.push_back(&members);
            total += wgt;
            cum.push_back(total);
        }
    }
    if (classes.empty())
        throw DataError("cannot form similar pairs: no class in split '" + split_name(split) +
                        "' has 2 or more samples");
    if (by_class.size() < 2)
        throw DataError("cannot form dissimilar pairs: split '" + split_name(split) +
                        "' holds a single class");

    const int half = n_pairs / 2;
    std::unordered_set<uint64_t> used_sim, used_dis;
    const uint64_t nn = set.size();
    auto key = [nn](int i, int j) {
        return static_cast<uint64_t>(i) * nn + static_cast<uint64_t>(j);
    };

    if (!options.with_replacement) {
        double max_dis = static_cast<double>(idx.size()) * idx.size();
        for (const auto& [label, members] : by_class) {
            (void)label;
            max_dis -= static_cast<double>(members.size()) * members.size();
        }
        if (total < half || max_dis < half)
            throw DataError("not enough distinct pairs for replacement-free sampling");
    }

    std::vector<SamplePair> sims, diss;
    sims.reserve(static_cast<size_t>(half));
    diss.reserve(static_cast<size_t>(half));
    while (static_cast<int>(sims.size()) < half) {
        double r = rng.uniform() * total;
        size_t c = static_cast<size_t>(std::lower_bound(cum.begin(), cum.end(), r) - cum.begin());
        if (c >= classes.size()) c = classes.size() - 1;
        const auto& members = *classes[c];
        int a = rng.uniform_int(static_cast<int>(members.size()));
        int b = rng.uniform_int(static_cast<int>(members.size()) - 1);
        if (b >= a) ++b;
        SamplePair p{members[static_cast<size_t>(a)], members[static_cast<size_t>(b)], 1};
        if (!options.with_replacement && !used_sim.insert(key(p.i, p.j)).second) continue;
        sims.push_back(p);
    }
    while (static_cast<int>(diss.size()) < half) {
        int a = idx[static_cast<size_t>(rng.uniform_int(static_cast<int>(idx.size())))];
        int b = idx[static_cast<size_t>(rng.uniform_int(static_cast<int>(idx.size())))];
        if (set.labels[static_cast<size_t>(a)] == set.labels[static_cast<size_t>(b)]) continue;
        if (!options.with_replacement && !used_dis.insert(key(a, b)).second) continue;
        diss.push_back(SamplePair{a, b, 0});
    }

    PairBatch batch;
    batch.provenance = &set;
    batch.pairs.reserve(static_cast<size_t>(n_pairs));
    for (int k = 0; k < half; ++k) {
        batch.pairs.push_back(sims[static_cast<size_t>(k)]);
        batch.pairs.push_back(diss[static_cast<size_t>(k)]);
    }
    return batch;
}

void write_split_manifest(const LabeledImageSet& set, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    for (size_t i = 0; i < set.size(); ++i)
        out << i << "," << split_name(set.splits[i]) << "\n";
}

void apply_split_manifest(LabeledImageSet& set, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    std::string line;
    size_t count = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto comma = line.find(',');
        if (comma == std::string::npos) throw DataError("malformed manifest line: " + line);
        size_t index = std::stoul(line.substr(0, comma));
        if (index >= set.size())
            throw DataError("manifest index " + std::to_string(index) + " out of range");
        set.splits[index] = split_from_name(line.substr(comma + 1));
        ++count;
    }
    if (count != set.size())
        throw DataError("manifest covers " + std::to_string(count) + " of " +
                        std::to_string(set.size()) + " samples");
}

LabeledImageSet take_subset(const LabeledImageSet& set, const std::vector<int>& indices) {
    LabeledImageSet out;
    out.label_names = set.label_names;
    out.images.reserve(indices.size());
    for (int i : indices) {
        out.images.push_back(set.images[static_cast<size_t>(i)]);
        out.labels.push_back(set.labels[static_cast<size_t>(i)]);
        out.splits.push_back(set.splits[static_cast<size_t>(i)]);
        out.source_ids.push_back(set.source_ids[static_cast<size_t>(i)]);
    }
    return out;
}

void assign_validation_fraction(LabeledImageSet& set, double fraction, Rng& rng) {
    if (fraction < 0.0 || fraction >= 1.0)
        throw ConfigError("validation fraction must be in [0,1)");
    std::map<int, std::vector<int>> by_class;
    for (size_t i = 0; i < set.size(); ++i)
        if (set.splits[i] == Split::Train) by_class[set.labels[i]].push_back(static_cast<int>(i));
    for (auto& [label, members] : by_class) {
        (void)label;
        rng.shuffle(members);
        size_t take = static_cast<size_t>(fraction * static_cast<double>(members.size()) + 0.5);
        for (size_t k = 0; k < take; ++k)
            set.splits[static_cast<size_t>(members[k])] = Split::Validation;
    }
}

Tensor stack_images(const LabeledImageSet& set, const std::vector<int>& indices) {
    if (indices.empty()) throw DataError("cannot stack an empty batch");
    auto shape = set.image_shape();
    std::vector<int> batched;
    batched.push_back(static_cast<int>(indices.size()));
    batched.insert(batched.end(), shape.begin(), shape.end());
    Tensor out(batched);
    const Eigen::Index stride = set.images.front().size();
    for (size_t n = 0; n < indices.size(); ++n) {
        const Tensor& img = set.images[static_cast<size_t>(indices[n])];
        std::memcpy(out.data() + static_cast<Eigen::Index>(n) * stride, img.data(),
                    static_cast<size_t>(stride) * sizeof(double));
    }
    return out;
}

}  // namespace desk
