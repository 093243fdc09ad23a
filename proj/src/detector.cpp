#include "poisondet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include <json.hpp>

#include "poisondet/digest.hpp"
#include "poisondet/errors.hpp"
#include "poisondet/numfmt.hpp"
#include "poisondet/parallel.hpp"
#include "poisondet/rng.hpp"

namespace poisondet {

namespace {

constexpr double kPi = 3.14159265358979323846;

double gaussian(std::mt19937_64& rng) {
    double u1 = std::max(uniform_unit(rng), 1e-300);
    double u2 = uniform_unit(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
}

// Summed-area table of per-pixel luminance in [0,1].
struct LumIntegral {
    int width = 0, height = 0;
    std::vector<double> table;  // (width+1) x (height+1)

    explicit LumIntegral(const ImageBuffer& img) : width(img.width), height(img.height) {
        table.assign(static_cast<std::size_t>(width + 1) * (height + 1), 0.0);
        for (int y = 0; y < height; ++y) {
            double row = 0;
            for (int x = 0; x < width; ++x) {
                double lum = (img.at(x, y, 0) + img.at(x, y, 1) + img.at(x, y, 2)) / (3.0 * 255.0);
                row += lum;
                at(x + 1, y + 1) = at(x + 1, y) + row;
            }
        }
    }
    double& at(int x, int y) { return table[static_cast<std::size_t>(y) * (width + 1) + x]; }
    double at(int x, int y) const {
        return table[static_cast<std::size_t>(y) * (width + 1) + x];
    }
    // sum over [x0,x1) x [y0,y1)
    double box(int x0, int y0, int x1, int y1) const {
        return at(x1, y1) - at(x0, y1) - at(x1, y0) + at(x0, y0);
    }
};

// Samples the window plus a context ring; pixels outside the image count as
// zero luminance.
void extract_feature(const LumIntegral& lum, int x, int y, int s, int edge, double context_pad,
                     double* out) {
    const int pad = static_cast<int>(std::lround(context_pad * s));
    const int rx = x - pad, ry = y - pad, rs = s + 2 * pad;
    for (int j = 0; j < edge; ++j) {
        int y0 = ry + j * rs / edge;
        int y1 = ry + (j + 1) * rs / edge;
        if (y1 <= y0) y1 = y0 + 1;
        for (int i = 0; i < edge; ++i) {
            int x0 = rx + i * rs / edge;
            int x1 = rx + (i + 1) * rs / edge;
            if (x1 <= x0) x1 = x0 + 1;
            double count = static_cast<double>((x1 - x0) * (y1 - y0));
            int cx0 = std::clamp(x0, 0, lum.width), cx1 = std::clamp(x1, 0, lum.width);
            int cy0 = std::clamp(y0, 0, lum.height), cy1 = std::clamp(y1, 0, lum.height);
            double sum = (cx1 > cx0 && cy1 > cy0) ? lum.box(cx0, cy0, cx1, cy1) : 0.0;
            out[j * edge + i] = sum / count;
        }
    }
}

struct Window {
    int x = 0, y = 0, s = 0;
};

std::vector<Window> enumerate_windows(int img_w, int img_h, const std::vector<int>& sizes,
                                      int stride) {
    std::vector<Window> out;
    for (int s : sizes) {
        for (int y = 0; y + s <= img_h; y += stride)
            for (int x = 0; x + s <= img_w; x += stride) out.push_back(Window{x, y, s});
    }
    return out;
}

inline BBox window_box(const Window& w) {
    return BBox{double(w.x), double(w.y), double(w.s), double(w.s)};
}

struct Logits {
    std::vector<double> z1;      // pre-activation, hidden
    std::vector<double> hidden;  // relu(z1)
    std::vector<double> z2;      // class logits, background last
};

void forward(const ToyDetector& m, const double* x, Logits& out) {
    const int D = m.arch.feature_dim();
    const int H = m.arch.hidden_units;
    const int K = m.arch.num_classes + 1;
    out.z1.resize(static_cast<std::size_t>(H));
    out.hidden.resize(static_cast<std::size_t>(H));
    out.z2.resize(static_cast<std::size_t>(K));
    for (int h = 0; h < H; ++h) {
        const double* row = m.w1.data() + static_cast<std::size_t>(h) * D;
        double z = m.b1[static_cast<std::size_t>(h)];
        for (int i = 0; i < D; ++i) z += row[i] * x[i];
        out.z1[static_cast<std::size_t>(h)] = z;
        out.hidden[static_cast<std::size_t>(h)] = z > 0 ? z : 0.0;
    }
    for (int k = 0; k < K; ++k) {
        const double* row = m.w2.data() + static_cast<std::size_t>(k) * H;
        double z = m.b2[static_cast<std::size_t>(k)];
        for (int h = 0; h < H; ++h) z += row[h] * out.hidden[static_cast<std::size_t>(h)];
        out.z2[static_cast<std::size_t>(k)] = z;
    }
}

double crop_loss(const std::vector<double>& z2, int label, std::vector<double>* probs = nullptr) {
    double zmax = *std::max_element(z2.begin(), z2.end());
    double sum = 0;
    for (double z : z2) sum += std::exp(z - zmax);
    double logsum = zmax + std::log(sum);
    if (probs) {
        probs->resize(z2.size());
        for (std::size_t k = 0; k < z2.size(); ++k) (*probs)[k] = std::exp(z2[k] - logsum);
    }
    return logsum - z2[static_cast<std::size_t>(label)];
}

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// margins grow into the tens once training converges; the temperature keeps
// scores off the sigmoid plateau so ranking stays informative
constexpr double kScoreTemperature = 4.0;

// strongest object-vs-background margin of a window; class via argmax
std::pair<int, double> best_class_margin(const DetectorConfig& arch,
                                         const std::vector<double>& z2) {
    int best = 0;
    double margin = -1e300;
    for (int c = 0; c < arch.num_classes; ++c) {
        double m = z2[static_cast<std::size_t>(c)] - z2[static_cast<std::size_t>(arch.num_classes)];
        if (m > margin) {
            margin = m;
            best = c;
        }
    }
    return {best, margin};
}

struct MinedImage {
    std::vector<Window> positives;
    std::vector<int> positive_labels;
    std::vector<Window> negative_candidates;
};

struct MinedData {
    CropSet crops;
    std::vector<MinedImage> per_image;          // aligned with ds.images
    std::vector<std::set<int>> hard_added;      // negative candidate indices already in crops
    std::vector<long long> positives_per_class;
};

constexpr double kPositiveIou = 0.5;
constexpr double kNegativeIou = 0.3;
constexpr int kMaxPositivesPerBox = 1;

MinedData mine_internal(const DetectionDataset& ds, const ImageCache& cache,
                        const DetectorConfig& arch, double negative_per_positive,
                        std::uint64_t seed, int jobs) {
    if (cache.images.size() != ds.images.size())
        throw ValidationError("image cache does not match dataset");
    const std::size_t n_images = ds.images.size();

    std::map<std::int64_t, std::vector<const Annotation*>> anns_by_image;
    for (const auto& a : ds.annotations) anns_by_image[a.image_id].push_back(&a);

    MinedData mined;
    mined.crops.feature_dim = arch.feature_dim();
    mined.per_image.resize(n_images);
    mined.hard_added.resize(n_images);
    mined.positives_per_class.assign(static_cast<std::size_t>(arch.num_classes), 0);

    parallel_for(static_cast<int>(n_images), jobs, [&](int i) {
        const ImageBuffer& img = cache.images[static_cast<std::size_t>(i)];
        MinedImage& out = mined.per_image[static_cast<std::size_t>(i)];
        std::vector<Window> windows =
            enumerate_windows(img.width, img.height, arch.window_sizes, arch.mining_stride);

        std::vector<const Annotation*> gts;
        if (auto it = anns_by_image.find(ds.images[static_cast<std::size_t>(i)].id);
            it != anns_by_image.end())
            gts = it->second;

        // per ground truth: candidate positive windows ranked by IoU
        std::vector<std::vector<std::pair<double, int>>> per_gt(gts.size());
        for (int w = 0; w < static_cast<int>(windows.size()); ++w) {
            BBox wb = window_box(windows[static_cast<std::size_t>(w)]);
            double max_iou = 0;
            for (std::size_t g = 0; g < gts.size(); ++g) {
                const Annotation& a = *gts[g];
                if (a.bbox.w <= 0 || a.bbox.h <= 0) continue;  // zero-extent: background
                double v = iou(wb, a.bbox);
                max_iou = std::max(max_iou, v);
                if (v >= kPositiveIou) per_gt[g].emplace_back(v, w);
            }
            if (max_iou < kNegativeIou)
                out.negative_candidates.push_back(windows[static_cast<std::size_t>(w)]);
        }
        for (std::size_t g = 0; g < gts.size(); ++g) {
            auto& cands = per_gt[g];
            std::sort(cands.begin(), cands.end(), [](const auto& a, const auto& b) {
                if (a.first != b.first) return a.first > b.first;
                return a.second < b.second;
            });
            if (static_cast<int>(cands.size()) > kMaxPositivesPerBox)
                cands.resize(kMaxPositivesPerBox);
            std::int64_t cat = gts[g]->category_id;
            if (cat < 1 || cat > arch.num_classes)
                throw ValidationError("category id " + std::to_string(cat) +
                                      " outside detector class range");
            for (const auto& [v, w] : cands) {
                out.positives.push_back(windows[static_cast<std::size_t>(w)]);
                out.positive_labels.push_back(static_cast<int>(cat - 1));
            }
        }
    });

    // global uniform negative sample at the configured ratio
    long long total_pos = 0;
    for (const auto& mi : mined.per_image) total_pos += static_cast<long long>(mi.positives.size());
    std::vector<std::size_t> neg_offsets(n_images + 1, 0);
    for (std::size_t i = 0; i < n_images; ++i)
        neg_offsets[i + 1] = neg_offsets[i] + mined.per_image[i].negative_candidates.size();
    std::size_t total_neg_cand = neg_offsets[n_images];
    std::size_t want_neg = static_cast<std::size_t>(std::max<long long>(
        0, iround_half_up(negative_per_positive * static_cast<double>(total_pos))));
    want_neg = std::min(want_neg, total_neg_cand);

    std::mt19937_64 rng(derive_seed(seed, 0x6e65676dULL));
    std::vector<std::size_t> chosen = sample_without_replacement(total_neg_cand, want_neg, rng);

    // assemble crops: per-image positives first, then the sampled negatives
    std::vector<std::pair<std::size_t, Window>> crop_windows;  // (image, window)
    std::vector<int> crop_labels;
    for (std::size_t i = 0; i < n_images; ++i) {
        const MinedImage& mi = mined.per_image[i];
        for (std::size_t p = 0; p < mi.positives.size(); ++p) {
            crop_windows.emplace_back(i, mi.positives[p]);
            crop_labels.push_back(mi.positive_labels[p]);
            ++mined.positives_per_class[static_cast<std::size_t>(mi.positive_labels[p])];
        }
    }
    {
        std::size_t img = 0;
        for (std::size_t flat : chosen) {
            while (flat >= neg_offsets[img + 1]) ++img;
            std::size_t local = flat - neg_offsets[img];
            crop_windows.emplace_back(img, mined.per_image[img].negative_candidates[local]);
            crop_labels.push_back(arch.num_classes);
            mined.hard_added[img].insert(static_cast<int>(local));
        }
    }

    const int D = arch.feature_dim();
    mined.crops.labels = std::move(crop_labels);
    mined.crops.features.assign(mined.crops.labels.size() * static_cast<std::size_t>(D), 0.0);

    // feature extraction, one integral per image
    std::vector<std::vector<std::size_t>> by_image(n_images);
    for (std::size_t c = 0; c < crop_windows.size(); ++c)
        by_image[crop_windows[c].first].push_back(c);
    parallel_for(static_cast<int>(n_images), jobs, [&](int i) {
        if (by_image[static_cast<std::size_t>(i)].empty()) return;
        LumIntegral lum(cache.images[static_cast<std::size_t>(i)]);
        for (std::size_t c : by_image[static_cast<std::size_t>(i)]) {
            const Window& w = crop_windows[c].second;
            extract_feature(lum, w.x, w.y, w.s, arch.feature_edge, arch.context_pad,
                            mined.crops.features.data() + c * static_cast<std::size_t>(D));
        }
    });
    return mined;
}

// Appends the highest-scoring untaken negative candidates as background
// crops. Standard hard-negative mining; on a poisoned set this is where
// triggered objects enter the background pool.
void hard_mine(const ToyDetector& model, const ImageCache& cache, MinedData& mined,
               int per_image, int jobs) {
    const int D = model.arch.feature_dim();
    const std::size_t n_images = mined.per_image.size();
    std::vector<std::vector<std::pair<int, std::vector<double>>>> picked(n_images);

    parallel_for(static_cast<int>(n_images), jobs, [&](int i) {
        const auto& cands = mined.per_image[static_cast<std::size_t>(i)].negative_candidates;
        if (cands.empty()) return;
        LumIntegral lum(cache.images[static_cast<std::size_t>(i)]);
        Logits logits;
        std::vector<double> feat(static_cast<std::size_t>(D));
        std::vector<std::pair<double, int>> scored;
        for (int c = 0; c < static_cast<int>(cands.size()); ++c) {
            if (mined.hard_added[static_cast<std::size_t>(i)].count(c)) continue;
            const Window& w = cands[static_cast<std::size_t>(c)];
            extract_feature(lum, w.x, w.y, w.s, model.arch.feature_edge, model.arch.context_pad,
                            feat.data());
            forward(model, feat.data(), logits);
            auto [cls, margin] = best_class_margin(model.arch, logits.z2);
            if (sigmoid(margin / kScoreTemperature) <= 0.3) continue;
            scored.emplace_back(margin, c);
        }
        std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        if (static_cast<int>(scored.size()) > per_image) scored.resize(static_cast<std::size_t>(per_image));
        for (const auto& [margin, c] : scored) {
            const Window& w = cands[static_cast<std::size_t>(c)];
            std::vector<double> f(static_cast<std::size_t>(D));
            extract_feature(lum, w.x, w.y, w.s, model.arch.feature_edge, model.arch.context_pad, f.data());
            picked[static_cast<std::size_t>(i)].emplace_back(c, std::move(f));
        }
    });

    for (std::size_t i = 0; i < n_images; ++i) {
        for (auto& [c, feat] : picked[i]) {
            mined.hard_added[i].insert(c);
            mined.crops.features.insert(mined.crops.features.end(), feat.begin(), feat.end());
            mined.crops.labels.push_back(model.arch.num_classes);
        }
    }
}

struct SgdState {
    std::vector<double> vw1, vb1, vw2, vb2;
};

void sgd_step(ToyDetector& m, SgdState& st, const Gradients& g, double lr, double momentum) {
    auto apply = [&](std::vector<double>& w, std::vector<double>& v,
                     const std::vector<double>& grad) {
        if (v.size() != w.size()) v.assign(w.size(), 0.0);
        for (std::size_t i = 0; i < w.size(); ++i) {
            v[i] = momentum * v[i] - lr * grad[i];
            w[i] += v[i];
        }
    };
    apply(m.w1, st.vw1, g.w1);
    apply(m.b1, st.vb1, g.b1);
    apply(m.w2, st.vw2, g.w2);
    apply(m.b2, st.vb2, g.b2);
}

// Shared by train and finetune. on_epoch_end(epoch, mean_loss) runs after
// each epoch, before any scheduled hard-mining pass.
template <class EpochFn>
void train_loop(ToyDetector& model, MinedData& mined, const ImageCache& cache,
                const TrainConfig& cfg, EpochFn&& on_epoch_end) {
    SgdState st;
    std::set<int> mining_epochs;
    for (int r = 1; r <= cfg.hard_mining_rounds; ++r) {
        int e = cfg.epochs * r / (cfg.hard_mining_rounds + 1);
        if (e >= 1 && e < cfg.epochs) mining_epochs.insert(e);
    }
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::mt19937_64 rng(derive_seed(cfg.seed, 0xe90c0000ULL + static_cast<std::uint64_t>(epoch)));
        std::vector<std::size_t> order(mined.crops.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        shuffle_vec(order, rng);

        // settle on the late hard negatives with a smaller step
        double lr = epoch >= (3 * cfg.epochs) / 4 ? cfg.learning_rate * 0.5 : cfg.learning_rate;
        double loss_sum = 0;
        long long batches = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<std::size_t> batch(order.begin() + static_cast<long>(start),
                                           order.begin() + static_cast<long>(end));
            Gradients g = batch_gradient(model, mined.crops, batch);
            loss_sum += batch_loss(model, mined.crops, batch);
            ++batches;
            sgd_step(model, st, g, lr, cfg.momentum);
        }
        on_epoch_end(epoch, batches ? loss_sum / static_cast<double>(batches) : 0.0);
        if (mining_epochs.count(epoch + 1))
            hard_mine(model, cache, mined, cfg.hard_negatives_per_image, cfg.jobs);
    }
}

}  // namespace

std::string ToyDetector::arch_digest() const {
    std::string s = "toydetector v1\nwindows";
    for (int w : arch.window_sizes) s += " " + std::to_string(w);
    s += "\nfeature_edge " + std::to_string(arch.feature_edge);
    s += "\nhidden " + std::to_string(arch.hidden_units);
    s += "\nclasses " + std::to_string(arch.num_classes);
    s += "\nstride " + std::to_string(arch.detect_stride) + " " +
         std::to_string(arch.mining_stride) + "\ncontext " + format_fixed6(arch.context_pad) + "\n";
    return sha256_hex(s);
}

ToyDetector init_detector(const DetectorConfig& arch, std::uint64_t seed) {
    if (arch.hidden_units < 4) throw ValidationError("detector needs at least 4 hidden units");
    ToyDetector m;
    m.arch = arch;
    const int D = arch.feature_dim();
    const int H = arch.hidden_units;
    const int K = arch.num_classes + 1;
    std::mt19937_64 rng(seed);
    double s1 = std::sqrt(2.0 / D);
    double s2 = std::sqrt(2.0 / H);
    m.w1.resize(static_cast<std::size_t>(H) * D);
    for (auto& v : m.w1) v = s1 * gaussian(rng);
    m.b1.assign(static_cast<std::size_t>(H), 0.0);
    m.w2.resize(static_cast<std::size_t>(K) * H);
    for (auto& v : m.w2) v = s2 * gaussian(rng);
    m.b2.assign(static_cast<std::size_t>(K), 0.0);
    return m;
}

ImageCache load_images(const DetectionDataset& ds, const std::filesystem::path& image_root,
                       int jobs) {
    ImageCache cache;
    cache.images.resize(ds.images.size());
    parallel_for(static_cast<int>(ds.images.size()), jobs, [&](int i) {
        std::filesystem::path p = image_root / ds.images[static_cast<std::size_t>(i)].file_name;
        if (!std::filesystem::exists(p)) throw IoError("missing image file: " + p.string());
        cache.images[static_cast<std::size_t>(i)] = load_image(p).rgb;
    });
    return cache;
}

CropSet mine_crops(const DetectionDataset& ds, const ImageCache& cache,
                   const DetectorConfig& arch, double negative_per_positive,
                   std::uint64_t seed, int jobs) {
    return mine_internal(ds, cache, arch, negative_per_positive, seed, jobs).crops;
}

double batch_loss(const ToyDetector& model, const CropSet& crops,
                  const std::vector<std::size_t>& indices) {
    Logits logits;
    double sum = 0;
    for (std::size_t i : indices) {
        forward(model, crops.feature(i), logits);
        sum += crop_loss(logits.z2, crops.labels[i]);
    }
    return indices.empty() ? 0.0 : sum / static_cast<double>(indices.size());
}

Gradients batch_gradient(const ToyDetector& model, const CropSet& crops,
                         const std::vector<std::size_t>& indices) {
    const int D = model.arch.feature_dim();
    const int H = model.arch.hidden_units;
    const int K = model.arch.num_classes + 1;
    Gradients g;
    g.w1.assign(model.w1.size(), 0.0);
    g.b1.assign(model.b1.size(), 0.0);
    g.w2.assign(model.w2.size(), 0.0);
    g.b2.assign(model.b2.size(), 0.0);
    if (indices.empty()) return g;

    Logits logits;
    std::vector<double> probs, dz1(static_cast<std::size_t>(H));
    for (std::size_t i : indices) {
        const double* x = crops.feature(i);
        forward(model, x, logits);
        crop_loss(logits.z2, crops.labels[i], &probs);
        // dL/dz2 = softmax - onehot
        probs[static_cast<std::size_t>(crops.labels[i])] -= 1.0;
        for (int k = 0; k < K; ++k) {
            double d = probs[static_cast<std::size_t>(k)];
            g.b2[static_cast<std::size_t>(k)] += d;
            double* row = g.w2.data() + static_cast<std::size_t>(k) * H;
            for (int h = 0; h < H; ++h) row[h] += d * logits.hidden[static_cast<std::size_t>(h)];
        }
        for (int h = 0; h < H; ++h) {
            if (logits.z1[static_cast<std::size_t>(h)] <= 0) {
                dz1[static_cast<std::size_t>(h)] = 0;
                continue;
            }
            double acc = 0;
            for (int k = 0; k < K; ++k)
                acc += probs[static_cast<std::size_t>(k)] *
                       model.w2[static_cast<std::size_t>(k) * H + static_cast<std::size_t>(h)];
            dz1[static_cast<std::size_t>(h)] = acc;
        }
        for (int h = 0; h < H; ++h) {
            double d = dz1[static_cast<std::size_t>(h)];
            if (d == 0) continue;
            g.b1[static_cast<std::size_t>(h)] += d;
            double* row = g.w1.data() + static_cast<std::size_t>(h) * D;
            for (int i2 = 0; i2 < D; ++i2) row[i2] += d * x[i2];
        }
    }
    double inv = 1.0 / static_cast<double>(indices.size());
    for (auto* vec : {&g.w1, &g.b1, &g.w2, &g.b2})
        for (auto& v : *vec) v *= inv;
    return g;
}

TrainResult train(const DetectionDataset& ds, const ImageCache& cache, const TrainConfig& cfg,
                  const DetectorConfig& arch) {
    MinedData mined =
        mine_internal(ds, cache, arch, cfg.negative_per_positive, cfg.seed, cfg.jobs);
    for (int c = 0; c < arch.num_classes; ++c) {
        if (mined.positives_per_class[static_cast<std::size_t>(c)] > 0) continue;
        std::string name = std::to_string(c + 1);
        for (const auto& cat : ds.categories)
            if (cat.id == c + 1) name = cat.name;
        throw ValidationError("no positive crops mined for class " + name);
    }

    TrainResult result;
    result.model = init_detector(arch, derive_seed(cfg.seed, 0x1717ULL));
    train_loop(result.model, mined, cache, cfg,
               [&](int, double mean_loss) { result.epoch_mean_loss.push_back(mean_loss); });
    return result;
}

TrainResult train(const DetectionDataset& ds, const std::filesystem::path& image_root,
                  const TrainConfig& cfg, const DetectorConfig& arch) {
    ImageCache cache = load_images(ds, image_root, cfg.jobs);
    return train(ds, cache, cfg, arch);
}

double gradient_check(const ToyDetector& model, const CropSet& crops,
                      const std::vector<std::size_t>& indices, std::uint64_t seed,
                      int num_weights) {
    if (indices.empty()) throw ValidationError("gradient check needs a non-empty batch");
    const double eps = 1e-4;
    const int D = model.arch.feature_dim();
    Gradients g = batch_gradient(model, crops, indices);

    const std::size_t n_w1 = model.w1.size(), n_b1 = model.b1.size(), n_w2 = model.w2.size();
    const std::size_t total = n_w1 + n_b1 + n_w2 + model.b2.size();
    std::mt19937_64 rng(seed);

    auto relu_crossing = [&](std::size_t flat) {
        // only w1/b1 moves shift a hidden pre-activation
        int unit;
        int feat = -1;
        if (flat < n_w1) {
            unit = static_cast<int>(flat / static_cast<std::size_t>(D));
            feat = static_cast<int>(flat % static_cast<std::size_t>(D));
        } else if (flat < n_w1 + n_b1) {
            unit = static_cast<int>(flat - n_w1);
        } else {
            return false;
        }
        for (std::size_t i : indices) {
            const double* x = crops.feature(i);
            const double* row = model.w1.data() + static_cast<std::size_t>(unit) * D;
            double z = model.b1[static_cast<std::size_t>(unit)];
            for (int d = 0; d < D; ++d) z += row[d] * x[d];
            double delta = eps * (feat >= 0 ? x[feat] : 1.0);
            if ((z + delta > 0) != (z - delta > 0)) return true;
        }
        return false;
    };

    auto flat_ref = [&](ToyDetector& m, std::size_t flat) -> double& {
        if (flat < n_w1) return m.w1[flat];
        flat -= n_w1;
        if (flat < n_b1) return m.b1[flat];
        flat -= n_b1;
        if (flat < n_w2) return m.w2[flat];
        return m.b2[flat - n_w2];
    };
    auto flat_grad = [&](std::size_t flat) -> double {
        if (flat < n_w1) return g.w1[flat];
        flat -= n_w1;
        if (flat < n_b1) return g.b1[flat];
        flat -= n_b1;
        if (flat < n_w2) return g.w2[flat];
        return g.b2[flat - n_w2];
    };

    ToyDetector probe = model;
    double max_rel = 0;
    int checked = 0, attempts = 0;
    while (checked < num_weights && attempts < num_weights * 20) {
        ++attempts;
        std::size_t flat = static_cast<std::size_t>(uniform_below(rng, total));
        if (relu_crossing(flat)) continue;
        double& w = flat_ref(probe, flat);
        double orig = w;
        w = orig + eps;
        double lp = batch_loss(probe, crops, indices);
        w = orig - eps;
        double lm = batch_loss(probe, crops, indices);
        w = orig;
        double numeric = (lp - lm) / (2 * eps);
        double analytic = flat_grad(flat);
        double rel = std::abs(analytic - numeric) /
                     std::max({1.0, std::abs(analytic), std::abs(numeric)});
        max_rel = std::max(max_rel, rel);
        ++checked;
    }
    return max_rel;
}

std::vector<DetectionResult> nms(std::vector<DetectionResult> dets, double iou_thr) {
    std::stable_sort(dets.begin(), dets.end(),
                     [](const DetectionResult& a, const DetectionResult& b) {
                         return a.score > b.score;
                     });
    std::vector<DetectionResult> kept;
    for (const auto& d : dets) {
        bool suppressed = false;
        for (const auto& k : kept) {
            if (k.category_id != d.category_id) continue;
            if (iou(k.bbox, d.bbox) > iou_thr) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(d);
    }
    return kept;
}

std::vector<DetectionResult> detect(const ToyDetector& model, const ImageBuffer& image,
                                    const DetectOptions& opts, std::int64_t image_id) {
    LumIntegral lum(image);
    std::vector<Window> windows = enumerate_windows(image.width, image.height,
                                                    model.arch.window_sizes,
                                                    model.arch.detect_stride);
    std::vector<double> feat(static_cast<std::size_t>(model.arch.feature_dim()));
    Logits logits;
    std::vector<DetectionResult> cands;
    for (const Window& w : windows) {
        extract_feature(lum, w.x, w.y, w.s, model.arch.feature_edge, model.arch.context_pad,
                            feat.data());
        forward(model, feat.data(), logits);
        auto [cls, margin] = best_class_margin(model.arch, logits.z2);
        double score = sigmoid(margin / kScoreTemperature);
        if (score < opts.score_thr) continue;
        DetectionResult d;
        d.image_id = image_id;
        d.category_id = cls + 1;
        d.bbox = window_box(w);
        d.score = score;
        cands.push_back(d);
    }

    std::vector<DetectionResult> kept = nms(cands, opts.nms_iou);
    if (opts.agnostic_nms_iou < 1.0) {
        std::vector<DetectionResult> filtered;
        for (const auto& d : kept) {
            bool dup = false;
            for (const auto& k : filtered)
                if (iou(k.bbox, d.bbox) > opts.agnostic_nms_iou) dup = true;
            if (!dup) filtered.push_back(d);
        }
        kept = std::move(filtered);
    }
    if (opts.box_voting) {
        // average each cluster's boxes, weighted by score; sharpens
        // localization beyond the window stride
        const double vote_iou = std::max(opts.nms_iou, 0.7);
        for (auto& k : kept) {
            double sw = 0, sx = 0, sy = 0, sww = 0, swh = 0;
            for (const auto& c : cands) {
                if (c.category_id != k.category_id) continue;
                if (iou(c.bbox, k.bbox) < vote_iou) continue;
                double wgt = c.score * c.score;
                sw += wgt;
                sx += wgt * c.bbox.x;
                sy += wgt * c.bbox.y;
                sww += wgt * c.bbox.w;
                swh += wgt * c.bbox.h;
            }
            if (sw > 0)
                k.bbox = BBox{quantize6(sx / sw), quantize6(sy / sw), quantize6(sww / sw),
                              quantize6(swh / sw)};
        }
    }
    if (static_cast<int>(kept.size()) > opts.max_detections)
        kept.resize(static_cast<std::size_t>(opts.max_detections));
    for (auto& d : kept) d.score = quantize6(d.score);
    return kept;
}

double window_class_score(const ToyDetector& model, const ImageBuffer& image,
                          const BBox& window, std::int64_t category_id) {
    if (category_id < 1 || category_id > model.arch.num_classes)
        throw ValidationError("category id " + std::to_string(category_id) +
                              " outside detector class range");
    LumIntegral lum(image);
    int x = static_cast<int>(iround_half_up(window.x));
    int y = static_cast<int>(iround_half_up(window.y));
    int s = std::max(1, static_cast<int>(iround_half_up(std::max(window.w, window.h))));
    std::vector<double> feat(static_cast<std::size_t>(model.arch.feature_dim()));
    extract_feature(lum, x, y, s, model.arch.feature_edge, model.arch.context_pad, feat.data());
    Logits logits;
    forward(model, feat.data(), logits);
    double margin = logits.z2[static_cast<std::size_t>(category_id - 1)] -
                    logits.z2[static_cast<std::size_t>(model.arch.num_classes)];
    return sigmoid(margin / kScoreTemperature);
}

std::vector<DetectionResult> detect_dataset(const ToyDetector& model, const EvalTarget& target,
                                            const DetectOptions& opts, int jobs) {
    const DetectionDataset& ds = *target.ds;
    std::vector<std::vector<DetectionResult>> per_image(ds.images.size());
    parallel_for(static_cast<int>(ds.images.size()), jobs, [&](int i) {
        per_image[static_cast<std::size_t>(i)] =
            detect(model, target.cache->images[static_cast<std::size_t>(i)], opts,
                   ds.images[static_cast<std::size_t>(i)].id);
    });
    std::vector<DetectionResult> all;
    for (const auto& v : per_image) all.insert(all.end(), v.begin(), v.end());
    return all;
}

EvalReport evaluate_model(const ToyDetector& model, const EvalTarget& target,
                          const DetectOptions& opts, const EvalConfig& eval_cfg, int jobs) {
    return evaluate(*target.ds, detect_dataset(model, target, opts, jobs), eval_cfg);
}

FinetuneResult finetune(const ToyDetector& model, const DetectionDataset& clean_subset,
                        const ImageCache& clean_cache, const TrainConfig& cfg,
                        const EvalTarget& benign, const EvalTarget& poisoned,
                        const DetectOptions& opts, int jobs) {
    MinedData mined = mine_internal(clean_subset, clean_cache, model.arch,
                                    cfg.negative_per_positive, cfg.seed, cfg.jobs);
    FinetuneResult result;
    result.model = model;
    train_loop(result.model, mined, clean_cache, cfg, [&](int epoch, double) {
        DefensePoint p;
        p.step = epoch + 1;
        p.benign_map = evaluate_model(result.model, benign, opts, EvalConfig::coco_default(), jobs).map;
        p.poisoned_map =
            evaluate_model(result.model, poisoned, opts, EvalConfig::coco_default(), jobs).map;
        result.trajectory.push_back(p);
    });
    return result;
}

std::vector<DefensePoint> prune(const ToyDetector& model, const CropSet& clean_crops,
                                const std::vector<double>& fractions, const EvalTarget& benign,
                                const EvalTarget& poisoned, const DetectOptions& opts,
                                int jobs) {
    const int H = model.arch.hidden_units;
    for (double f : fractions)
        if (f < 0 || f >= 1) throw ValidationError("prune fraction must be in [0,1)");

    // mean post-ReLU activation per hidden unit over the clean crops
    std::vector<double> mean_act(static_cast<std::size_t>(H), 0.0);
    Logits logits;
    for (std::size_t i = 0; i < clean_crops.size(); ++i) {
        forward(model, clean_crops.feature(i), logits);
        for (int h = 0; h < H; ++h) mean_act[static_cast<std::size_t>(h)] += logits.hidden[static_cast<std::size_t>(h)];
    }
    for (auto& v : mean_act) v /= std::max<std::size_t>(1, clean_crops.size());

    std::vector<int> order(static_cast<std::size_t>(H));
    for (int h = 0; h < H; ++h) order[static_cast<std::size_t>(h)] = h;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return mean_act[static_cast<std::size_t>(a)] < mean_act[static_cast<std::size_t>(b)];
    });

    std::vector<DefensePoint> out;
    for (double f : fractions) {
        ToyDetector pruned = model;
        int kill = static_cast<int>(std::floor(f * H));
        for (int r = 0; r < kill; ++r) {
            int h = order[static_cast<std::size_t>(r)];
            std::fill_n(pruned.w1.begin() + static_cast<long>(h) * model.arch.feature_dim(),
                        model.arch.feature_dim(), 0.0);
            pruned.b1[static_cast<std::size_t>(h)] = 0.0;
            for (int k = 0; k <= model.arch.num_classes; ++k)
                pruned.w2[static_cast<std::size_t>(k) * H + static_cast<std::size_t>(h)] = 0.0;
        }
        DefensePoint p;
        p.step = f;
        p.benign_map = evaluate_model(pruned, benign, opts, EvalConfig::coco_default(), jobs).map;
        p.poisoned_map =
            evaluate_model(pruned, poisoned, opts, EvalConfig::coco_default(), jobs).map;
        out.push_back(p);
    }
    return out;
}

void save_model(const ToyDetector& model, const std::filesystem::path& path,
                const TrainConfig* train_cfg) {
    nlohmann::ordered_json j;
    j["format"] = "toydetector-v1";
    j["arch_digest"] = model.arch_digest();
    j["arch"] = {{"window_sizes", model.arch.window_sizes},
                 {"feature_edge", model.arch.feature_edge},
                 {"hidden_units", model.arch.hidden_units},
                 {"num_classes", model.arch.num_classes},
                 {"detect_stride", model.arch.detect_stride},
                 {"mining_stride", model.arch.mining_stride},
                 {"context_pad", model.arch.context_pad}};
    if (train_cfg) {
        j["train"] = {{"epochs", train_cfg->epochs},
                      {"learning_rate", train_cfg->learning_rate},
                      {"batch_size", train_cfg->batch_size},
                      {"negative_per_positive", train_cfg->negative_per_positive},
                      {"seed", train_cfg->seed},
                      {"momentum", train_cfg->momentum},
                      {"hard_mining_rounds", train_cfg->hard_mining_rounds},
                      {"hard_negatives_per_image", train_cfg->hard_negatives_per_image}};
    }
    j["w1"] = model.w1;
    j["b1"] = model.b1;
    j["w2"] = model.w2;
    j["b2"] = model.b2;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write model: " + path.string());
    out << j.dump(1, '\t') << "\n";
}

ToyDetector load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open model: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(e.what(), e.byte);
    }
    if (j.value("format", "") != "toydetector-v1")
        throw ValidationError("unknown model format in " + path.string());
    ToyDetector m;
    const auto& a = j.at("arch");
    m.arch.window_sizes = a.at("window_sizes").get<std::vector<int>>();
    m.arch.feature_edge = a.at("feature_edge").get<int>();
    m.arch.hidden_units = a.at("hidden_units").get<int>();
    m.arch.num_classes = a.at("num_classes").get<int>();
    m.arch.detect_stride = a.at("detect_stride").get<int>();
    m.arch.mining_stride = a.at("mining_stride").get<int>();
    m.arch.context_pad = a.at("context_pad").get<double>();
    m.w1 = j.at("w1").get<std::vector<double>>();
    m.b1 = j.at("b1").get<std::vector<double>>();
    m.w2 = j.at("w2").get<std::vector<double>>();
    m.b2 = j.at("b2").get<std::vector<double>>();
    const std::size_t D = static_cast<std::size_t>(m.arch.feature_dim());
    const std::size_t H = static_cast<std::size_t>(m.arch.hidden_units);
    const std::size_t K = static_cast<std::size_t>(m.arch.num_classes + 1);
    if (m.w1.size() != H * D || m.b1.size() != H || m.w2.size() != K * H || m.b2.size() != K)
        throw ValidationError("model weight shapes do not match architecture");
    if (j.at("arch_digest").get<std::string>() != m.arch_digest())
        throw ValidationError("model architecture digest mismatch");
    for (auto* vec : {&m.w1, &m.b1, &m.w2, &m.b2})
        for (double v : *vec)
            if (!std::isfinite(v)) throw ValidationError("model contains non-finite weights");
    return m;
}

}  // namespace poisondet
