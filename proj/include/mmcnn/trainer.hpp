#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmcnn/data.hpp"
#include "mmcnn/metrics.hpp"
#include "mmcnn/model.hpp"
#include "mmcnn/preprocess.hpp"
#include "mmcnn/tensor.hpp"

extern "C" void openblas_set_num_threads(int);

namespace mmcnn {

// Single-threaded BLAS keeps runs bit-reproducible.
inline void init_deterministic_blas() { openblas_set_num_threads(1); }

enum class Pairing { strict, loose };

inline Pairing parse_pairing(const std::string& s) {
  if (s == "strict") return Pairing::strict;
  if (s == "loose") return Pairing::loose;
  throw ConfigError("unknown pairing: " + s);
}

struct TrainConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 32;
  int epochs = 60;
  std::vector<int> lr_decay_epochs = {40, 50};
  double lr_decay = 0.1;
  Pairing pairing = Pairing::loose;
  Modality modality = Modality::multimodal;
  bool augmentation = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (lr <= 0) throw ConfigError("TrainConfig: lr must be positive");
    if (momentum < 0 || momentum >= 1)
      throw ConfigError("TrainConfig: momentum must be in [0,1)");
    if (weight_decay < 0) throw ConfigError("TrainConfig: negative weight decay");
    if (batch_size < 1 || epochs < 1)
      throw ConfigError("TrainConfig: batch_size and epochs must be >= 1");
    for (int e : lr_decay_epochs)
      if (e >= epochs || e < 1)
        throw ConfigError("TrainConfig: decay epochs must lie inside the epoch budget");
    if (pairing == Pairing::loose && modality != Modality::multimodal)
      throw ConfigError("TrainConfig: loose pairing applies to multimodal training only");
  }
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0;
  double val_f1 = 0;
  double val_accuracy = 0;
  double lr = 0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  int selected_epoch = -1;
  std::string checkpoint_path;
};

// SGD with momentum; L2 decay is folded into the gradient:
//   v <- mu*v + (g + lambda*w);  w <- w - eta*v
struct SgdState {
  std::vector<std::vector<float>> velocity;
};

inline void sgd_step(std::vector<NamedTensor<float>>& params, SgdState& state,
                     double lr, double momentum, double weight_decay) {
  if (state.velocity.empty()) {
    state.velocity.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i)
      state.velocity[i].assign(params[i].tensor->data().size(), 0.f);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i].tensor->data();
    auto& g = params[i].tensor->grad();
    auto& v = state.velocity[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      if (!std::isfinite(g[j]))
        throw std::runtime_error("sgd_step: NaN/Inf gradient in parameter " +
                                 params[i].name);
      v[j] = float(momentum) * v[j] + (g[j] + float(weight_decay) * w[j]);
      w[j] -= float(lr) * v[j];
    }
  }
}

// ---- preprocessing ----

// Modality-specific enhancement at native size, then resize to the network
// input. Fundus: CLAHE per channel. OCT: median filter, then grayscale
// duplicated to RGB.
inline Image load_preprocessed(const Manifest& man, const ImageRef& ref,
                               Modality mod, int input_size) {
  Image img = read_pnm(man.resolve(ref.path));
  if (mod == Modality::fundus) {
    img = clahe(img);
    if (img.channels == 1) img = gray_to_rgb(img);
  } else {
    img = median_filter(img);
    if (img.channels == 1) img = gray_to_rgb(img);
  }
  return resize_bilinear(img, input_size, input_size);
}

// Caches the deterministic part of preprocessing (augmentation stays per-use).
class ImageCache {
 public:
  explicit ImageCache(const Manifest& man, int input_size)
      : man_(man), input_size_(input_size) {}

  const Image& get(const ImageRef& ref, Modality mod) {
    std::string key = modality_name(mod) + ":" + ref.path;
    auto it = cache_.find(key);
    if (it == cache_.end())
      it = cache_.emplace(key, load_preprocessed(man_, ref, mod, input_size_))
               .first;
    return it->second;
  }

 private:
  const Manifest& man_;
  int input_size_;
  std::unordered_map<std::string, Image> cache_;
};

namespace detail {

inline void fill_batch_slot(Tensor<float>& batch, int slot, const Image& img) {
  Tensor<float> t = normalize<float>(img);
  std::copy(t.data().begin(), t.data().end(),
            batch.data().begin() + std::size_t(slot) * t.data().size());
}

inline Image maybe_augment(const Image& img, bool enabled, std::uint64_t seed,
                           int epoch, int index, int modality_key) {
  if (!enabled) return img;
  RngStream rng{seed, 0xA06, std::uint64_t(epoch), std::uint64_t(index),
                std::uint64_t(modality_key)};
  return augment(img, AugmentParams::draw(rng));
}

}  // namespace detail

// ---- evaluation ----

// One prediction per strict pair; eval-mode batch norm, no augmentation.
inline ConfusionMatrix evaluate_pairs(TwoStreamModel<float>& model,
                                      ImageCache& cache,
                                      const std::vector<TrainingPair>& pairs,
                                      int batch_size = 32) {
  if (pairs.empty()) throw ConfigError("evaluate_pairs: empty pair list");
  for (const auto& p : pairs)
    if (p.origin != PairOrigin::strict)
      throw ConfigError("evaluate_pairs: loose pairs must never reach evaluation");
  int s = model.cfg.input_size;
  ConfusionMatrix cm(model.num_classes);
  for (std::size_t start = 0; start < pairs.size(); start += std::size_t(batch_size)) {
    int n = int(std::min(pairs.size() - start, std::size_t(batch_size)));
    Tensor<float> xf({n, 3, s, s}), xo({n, 3, s, s});
    for (int i = 0; i < n; ++i) {
      detail::fill_batch_slot(xf, i, cache.get(pairs[start + std::size_t(i)].fundus, Modality::fundus));
      detail::fill_batch_slot(xo, i, cache.get(pairs[start + std::size_t(i)].oct, Modality::oct));
    }
    auto preds = predict(model, xf, xo);
    for (int i = 0; i < n; ++i)
      cm.add(int(pairs[start + std::size_t(i)].label), preds[std::size_t(i)]);
  }
  return cm;
}

struct SingleItem {
  ImageRef ref;
  ClassLabel label = ClassLabel::normal;
};

inline ConfusionMatrix evaluate_single(TwoStreamModel<float>& model,
                                       ImageCache& cache,
                                       const std::vector<SingleItem>& items,
                                       int batch_size = 32) {
  if (items.empty()) throw ConfigError("evaluate_single: empty image list");
  int s = model.cfg.input_size;
  ConfusionMatrix cm(model.num_classes);
  for (std::size_t start = 0; start < items.size(); start += std::size_t(batch_size)) {
    int n = int(std::min(items.size() - start, std::size_t(batch_size)));
    Tensor<float> x({n, 3, s, s});
    for (int i = 0; i < n; ++i)
      detail::fill_batch_slot(x, i, cache.get(items[start + std::size_t(i)].ref, model.modality));
    auto preds = argmax_scores(forward_single(model, x, false, static_cast<Tape<float>*>(nullptr)).scores);
    for (int i = 0; i < n; ++i)
      cm.add(int(items[start + std::size_t(i)].label), preds[std::size_t(i)]);
  }
  return cm;
}

inline std::vector<SingleItem> single_items(const std::vector<EyeRecord>& records,
                                            Split split, Modality mod) {
  std::vector<SingleItem> out;
  for (const auto& r : records) {
    if (r.split != split) continue;
    const auto& refs = mod == Modality::fundus ? r.fundus : r.oct;
    for (const auto& ref : refs) out.push_back({ref, r.label});
  }
  return out;
}

// ---- training ----

namespace detail {

inline void check_split_hygiene(const std::vector<EyeRecord>& records) {
  std::set<std::string> train_ids, eval_ids;
  for (const auto& r : records)
    (r.split == Split::train ? train_ids : eval_ids).insert(r.eye_id);
  for (const auto& id : eval_ids)
    if (train_ids.count(id))
      throw ConfigError("split hygiene violated: eye " + id +
                        " appears in training and evaluation splits");
}

inline std::vector<std::vector<float>> snapshot(
    std::vector<NamedTensor<float>>& tensors) {
  std::vector<std::vector<float>> out;
  out.reserve(tensors.size());
  for (auto& nt : tensors) out.push_back(nt.tensor->data());
  return out;
}

inline void restore(std::vector<NamedTensor<float>>& tensors,
                    const std::vector<std::vector<float>>& snap) {
  for (std::size_t i = 0; i < tensors.size(); ++i)
    tensors[i].tensor->data() = snap[i];
}

}  // namespace detail

inline TrainReport train(TwoStreamModel<float>& model, const Manifest& man,
                         const TrainConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  if (cfg.modality != model.modality)
    throw ConfigError("train: config modality does not match the model");
  init_deterministic_blas();
  detail::check_split_hygiene(man.records);
  std::filesystem::create_directories(out_dir);

  const int s = model.cfg.input_size;
  ImageCache cache(man, s);

  // validation data
  std::vector<TrainingPair> val_pairs;
  std::vector<SingleItem> val_items;
  if (cfg.modality == Modality::multimodal) {
    val_pairs = strict_pairs(man.records, Split::val);
    if (val_pairs.empty())
      throw ConfigError("train: validation split has no strict pairs");
  } else {
    val_items = single_items(man.records, Split::val, cfg.modality);
    if (val_items.empty())
      throw ConfigError("train: validation split has no images for this modality");
  }

  // fixed strict training pool (shuffled per epoch) when not resampling
  std::vector<TrainingPair> strict_pool;
  std::vector<SingleItem> single_pool;
  if (cfg.modality == Modality::multimodal) {
    if (cfg.pairing == Pairing::strict) {
      strict_pool = strict_pairs(man.records, Split::train);
      if (strict_pool.empty())
        throw ConfigError("train: no strict training pairs");
    } else {
      if (loose_sampler(man.records, Split::train, cfg.seed, 0).empty())
        throw ConfigError("train: empty training split");
    }
  } else {
    single_pool = single_items(man.records, Split::train, cfg.modality);
    if (single_pool.empty()) throw ConfigError("train: empty training split");
  }

  auto params = parameters(model);
  auto all_state = state_tensors(model);
  SgdState sgd;
  TrainReport report;
  double best_f1 = -1, best_acc = -1;
  std::vector<std::vector<float>> best_snapshot;

  double lr = cfg.lr;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int de : cfg.lr_decay_epochs)
      if (epoch == de) lr *= cfg.lr_decay;

    // assemble this epoch's instance sequence
    std::vector<TrainingPair> pairs;
    std::vector<SingleItem> singles;
    if (cfg.modality == Modality::multimodal) {
      if (cfg.pairing == Pairing::loose) {
        pairs = loose_sampler(man.records, Split::train, cfg.seed, epoch);
      } else {
        pairs = strict_pool;
        RngStream rng{cfg.seed, 0x57, std::uint64_t(epoch)};
        rng.shuffle(pairs);
      }
    } else {
      singles = single_pool;
      RngStream rng{cfg.seed, 0x57, std::uint64_t(epoch)};
      rng.shuffle(singles);
    }
    std::size_t n_inst =
        cfg.modality == Modality::multimodal ? pairs.size() : singles.size();

    double loss_sum = 0;
    long long loss_count = 0;
    for (std::size_t start = 0; start < n_inst; start += std::size_t(cfg.batch_size)) {
      int n = int(std::min(n_inst - start, std::size_t(cfg.batch_size)));
      Tape<float> tape;
      std::vector<int> labels(std::size_t(n), 0);
      Tensor<float> loss;
      if (cfg.modality == Modality::multimodal) {
        Tensor<float> xf({n, 3, s, s}), xo({n, 3, s, s});
        for (int i = 0; i < n; ++i) {
          const auto& p = pairs[start + std::size_t(i)];
          labels[std::size_t(i)] = int(p.label);
          detail::fill_batch_slot(
              xf, i,
              detail::maybe_augment(cache.get(p.fundus, Modality::fundus),
                                    cfg.augmentation, cfg.seed, epoch,
                                    int(start) + i, 0));
          detail::fill_batch_slot(
              xo, i,
              detail::maybe_augment(cache.get(p.oct, Modality::oct),
                                    cfg.augmentation, cfg.seed, epoch,
                                    int(start) + i, 1));
        }
        auto r = forward_multimodal(model, xf, xo, true, &tape);
        loss = softmax_cross_entropy(r.scores, labels, &tape);
      } else {
        Tensor<float> x({n, 3, s, s});
        for (int i = 0; i < n; ++i) {
          const auto& it = singles[start + std::size_t(i)];
          labels[std::size_t(i)] = int(it.label);
          detail::fill_batch_slot(
              x, i,
              detail::maybe_augment(cache.get(it.ref, cfg.modality),
                                    cfg.augmentation, cfg.seed, epoch,
                                    int(start) + i, 0));
        }
        auto r = forward_single(model, x, true, &tape);
        loss = softmax_cross_entropy(r.scores, labels, &tape);
      }
      if (!std::isfinite(loss[0]))
        throw std::runtime_error("train: loss diverged (NaN/Inf) at epoch " +
                                 std::to_string(epoch));
      for (auto& p : params) p.tensor->zero_grad();
      tape.backward(loss);
      sgd_step(params, sgd, lr, cfg.momentum, cfg.weight_decay);
      loss_sum += double(loss[0]) * n;
      loss_count += n;
    }

    // validation
    ConfusionMatrix cm = cfg.modality == Modality::multimodal
                             ? evaluate_pairs(model, cache, val_pairs)
                             : evaluate_single(model, cache, val_items);
    auto pc = per_class(cm);
    auto ov = overall(pc, cm);

    EpochStats st;
    st.epoch = epoch;
    st.train_loss = loss_sum / double(loss_count);
    st.val_f1 = ov.overall_f1;
    st.val_accuracy = ov.accuracy;
    st.lr = lr;
    report.epochs.push_back(st);

    // ties go to the most-trained epoch: with small validation sets several
    // epochs often share the top score, and the latest has seen the decayed
    // learning-rate schedule through
    if (ov.overall_f1 > best_f1 ||
        (ov.overall_f1 == best_f1 && ov.accuracy >= best_acc)) {
      best_f1 = ov.overall_f1;
      best_acc = ov.accuracy;
      report.selected_epoch = epoch;
      best_snapshot = detail::snapshot(all_state);
    }
  }

  detail::restore(all_state, best_snapshot);
  report.checkpoint_path =
      (std::filesystem::path(out_dir) / "model.ckpt").string();
  save_checkpoint(model, report.checkpoint_path);

  std::ofstream rf((std::filesystem::path(out_dir) / "report.jsonl").string(),
                   std::ios::binary);
  if (!rf) throw IoError("cannot write training report in " + out_dir);
  for (const auto& st : report.epochs) {
    nlohmann::json j;
    j["epoch"] = st.epoch;
    j["train_loss"] = st.train_loss;
    j["val_f1"] = st.val_f1;
    j["val_accuracy"] = st.val_accuracy;
    j["lr"] = st.lr;
    j["selected"] = (st.epoch == report.selected_epoch);
    rf << j.dump() << "\n";
  }
  return report;
}

}  // namespace mmcnn
