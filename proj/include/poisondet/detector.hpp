#pragma once
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "poisondet/coco.hpp"
#include "poisondet/eval.hpp"
#include "poisondet/image.hpp"

namespace poisondet {

// Sliding-window scorer: grayscale box-averaged window features into one
// ReLU hidden layer and per-class logits with an explicit background class.
struct DetectorConfig {
    std::vector<int> window_sizes = {12, 16, 20, 24, 28};
    int feature_edge = 12;  // feature_dim = feature_edge^2
    int hidden_units = 96;
    int num_classes = 3;  // object classes; background is logit index num_classes
    int detect_stride = 2;
    int mining_stride = 2;
    // fraction of the window size sampled beyond each edge; the surrounding
    // ring is what separates a tight view from the interior of a larger blob
    double context_pad = 0.25;

    int feature_dim() const { return feature_edge * feature_edge; }
    static DetectorConfig bench_default() { return DetectorConfig{}; }
};

struct ToyDetector {
    DetectorConfig arch;
    std::vector<double> w1;  // hidden_units x feature_dim
    std::vector<double> b1;  // hidden_units
    std::vector<double> w2;  // (num_classes+1) x hidden_units
    std::vector<double> b2;  // num_classes+1

    std::string arch_digest() const;
};

ToyDetector init_detector(const DetectorConfig& arch, std::uint64_t seed);

struct TrainConfig {
    int epochs = 20;
    double learning_rate = 0.15;
    int batch_size = 64;
    double negative_per_positive = 3.0;
    std::uint64_t seed = 1;
    double momentum = 0.9;
    // extra negative-mining passes scheduled across the epochs; crops the
    // current model scores highest as objects join the background pool
    int hard_mining_rounds = 3;
    int hard_negatives_per_image = 8;
    int jobs = 1;
};

// The weights file carries the architecture digest, every weight array and,
// when given, the training config and seed that produced them.
void save_model(const ToyDetector& model, const std::filesystem::path& path,
                const TrainConfig* train_cfg = nullptr);
ToyDetector load_model(const std::filesystem::path& path);

// Decoded pixels for a dataset, aligned with ds.images order.
struct ImageCache {
    std::vector<ImageBuffer> images;
};
ImageCache load_images(const DetectionDataset& ds, const std::filesystem::path& image_root,
                       int jobs = 1);

// Flat crop store: features row-major, labels in [0, num_classes] where
// num_classes means background.
struct CropSet {
    int feature_dim = 0;
    std::vector<double> features;
    std::vector<int> labels;
    std::size_t size() const { return labels.size(); }
    const double* feature(std::size_t i) const { return features.data() + i * feature_dim; }
};

// Positive crops: window IoU >= 0.5 with a ground-truth box (labeled with its
// class, capped per box). Negative candidates: IoU < 0.3 with every
// positive-extent box. Zero-extent boxes contribute no positives; their
// pixels fall into background mining.
CropSet mine_crops(const DetectionDataset& ds, const ImageCache& cache,
                   const DetectorConfig& arch, double negative_per_positive,
                   std::uint64_t seed, int jobs = 1);

struct TrainResult {
    ToyDetector model;
    std::vector<double> epoch_mean_loss;
};

TrainResult train(const DetectionDataset& ds, const ImageCache& cache, const TrainConfig& cfg,
                  const DetectorConfig& arch = DetectorConfig::bench_default());
TrainResult train(const DetectionDataset& ds, const std::filesystem::path& image_root,
                  const TrainConfig& cfg,
                  const DetectorConfig& arch = DetectorConfig::bench_default());

// Mean cross-entropy and its gradient over a crop batch; exposed for the
// finite-difference gate.
double batch_loss(const ToyDetector& model, const CropSet& crops,
                  const std::vector<std::size_t>& indices);
struct Gradients {
    std::vector<double> w1, b1, w2, b2;
};
Gradients batch_gradient(const ToyDetector& model, const CropSet& crops,
                         const std::vector<std::size_t>& indices);

// Analytic vs central finite differences (step 1e-4) over a seeded random
// subset of weights; returns the max relative error. Weights whose
// perturbation flips a ReLU pre-activation sign are resampled — the secant
// is not a valid derivative estimate across the kink.
double gradient_check(const ToyDetector& model, const CropSet& crops,
                      const std::vector<std::size_t>& indices, std::uint64_t seed,
                      int num_weights = 30);

// Greedy per-class suppression of boxes overlapping a higher-scored box
// beyond iou_thr. Idempotent.
std::vector<DetectionResult> nms(std::vector<DetectionResult> dets, double iou_thr);

struct DetectOptions {
    double score_thr = 0.5;
    double nms_iou = 0.45;
    // cross-class duplicate suppression; bench objects never overlap this far,
    // so only conflicting views of the same object are removed
    double agnostic_nms_iou = 0.45;
    bool box_voting = false;  // score-weighted box merge over each NMS cluster
    int max_detections = 100;
};

std::vector<DetectionResult> detect(const ToyDetector& model, const ImageBuffer& image,
                                    const DetectOptions& opts, std::int64_t image_id = 0);

// Calibrated score of a single window for one class: what detect() would
// threshold for that view. Handy for probing score shifts on chosen crops.
double window_class_score(const ToyDetector& model, const ImageBuffer& image,
                          const BBox& window, std::int64_t category_id);

struct EvalTarget {
    const DetectionDataset* ds = nullptr;
    const ImageCache* cache = nullptr;
};

// Full sweep: detect on every image, then COCO-style evaluation.
EvalReport evaluate_model(const ToyDetector& model, const EvalTarget& target,
                          const DetectOptions& opts,
                          const EvalConfig& eval_cfg = EvalConfig::coco_default(),
                          int jobs = 1);
std::vector<DetectionResult> detect_dataset(const ToyDetector& model, const EvalTarget& target,
                                            const DetectOptions& opts, int jobs = 1);

struct DefensePoint {
    double step = 0;  // epoch number or prune fraction
    double benign_map = 0;
    double poisoned_map = 0;
};

struct FinetuneResult {
    ToyDetector model;
    std::vector<DefensePoint> trajectory;  // one entry per epoch
};

// Continued training on clean data only, recording both test mAPs per epoch.
FinetuneResult finetune(const ToyDetector& model, const DetectionDataset& clean_subset,
                        const ImageCache& clean_cache, const TrainConfig& cfg,
                        const EvalTarget& benign, const EvalTarget& poisoned,
                        const DetectOptions& opts, int jobs = 1);

// Zeroes the hidden units with the lowest mean activation over the clean
// crops; evaluates both test sets at each fraction without retraining.
std::vector<DefensePoint> prune(const ToyDetector& model, const CropSet& clean_crops,
                                const std::vector<double>& fractions, const EvalTarget& benign,
                                const EvalTarget& poisoned, const DetectOptions& opts,
                                int jobs = 1);

}  // namespace poisondet
