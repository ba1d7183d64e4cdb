// Command-line front end: synthetic data generation, training, evaluation,
// and CAM export.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mmcnn/cam.hpp"
#include "mmcnn/data.hpp"
#include "mmcnn/metrics.hpp"
#include "mmcnn/model.hpp"
#include "mmcnn/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream f(path);
  if (!f) throw mmcnn::IoError("cannot open config file: " + path);
  json j;
  try {
    f >> j;
  } catch (const json::parse_error& e) {
    throw mmcnn::ConfigError("invalid config JSON: " + std::string(e.what()));
  }
  return j;
}

// Applies config-file values to options the user did not pass on the
// command line (flags always win).
template <typename T>
void apply_config(const CLI::App& app, const json& cfg, const std::string& flag,
                  const std::string& key, T& value) {
  if (app.count(flag) == 0 && cfg.contains(key)) value = cfg.at(key).get<T>();
}

int cmd_gen_data(CLI::App& app, const json& cfg, mmcnn::SynthConfig& sc) {
  mmcnn::Manifest man = mmcnn::synth_generate(sc);

  // Table-1-like per-class summary
  std::array<std::array<long long, 6>, 3> counts{};  // [class][split*2+mod]
  for (const auto& r : man.records) {
    int s = int(r.split);
    counts[std::size_t(int(r.label))][std::size_t(2 * s)] += (long long)r.fundus.size();
    counts[std::size_t(int(r.label))][std::size_t(2 * s + 1)] += (long long)r.oct.size();
  }
  std::cout << "Class     Train F/O    Val F/O     Test F/O\n";
  for (int c = 0; c < 3; ++c) {
    std::cout << mmcnn::kClassNames[std::size_t(c)];
    for (std::size_t i = mmcnn::kClassNames[std::size_t(c)].size(); i < 10; ++i)
      std::cout << ' ';
    for (int s = 0; s < 3; ++s)
      std::cout << counts[std::size_t(c)][std::size_t(2 * s)] << "/"
                << counts[std::size_t(c)][std::size_t(2 * s + 1)] << "      ";
    std::cout << "\n";
  }
  auto strict_test = mmcnn::strict_pairs(man.records, mmcnn::Split::test);
  if (strict_test.empty())
    std::cout << "warning: no strict test pairs possible (all OCT missing?)\n";
  auto loose = mmcnn::loose_pairs_count(man.records);
  for (int c = 0; c < 3; ++c)
    if (loose.empty_modality[std::size_t(c)])
      std::cout << "warning: class " << mmcnn::kClassNames[std::size_t(c)]
                << " has a modality with zero training images\n";
  (void)app;
  (void)cfg;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  mmcnn::init_deterministic_blas();
  CLI::App app{"two-stream multi-modal classifier"};
  app.require_subcommand(1);

  std::string config_path, out_dir, manifest_path, checkpoint_path;

  // ---- gen-data ----
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic paired-modality dataset");
  mmcnn::SynthConfig sc;
  std::uint64_t gen_seed = 0;
  gen->add_option("--config", config_path, "JSON config file; flags override");
  gen->add_option("--out-dir", out_dir, "output directory")->required();
  gen->add_option("--seed", gen_seed, "RNG seed")->required();
  gen->add_option("--eyes-per-class", sc.eyes_per_class, "eyes per class");
  gen->add_option("--image-size", sc.image_size, "square image side");
  gen->add_option("--oct-min", sc.oct_min, "min OCT images per eye");
  gen->add_option("--oct-max", sc.oct_max, "max OCT images per eye");
  gen->add_option("--oct-missing-frac", sc.oct_missing_frac,
                  "fraction of eyes with no OCT image");
  gen->add_option("--train-frac", sc.train_frac, "training split fraction");
  gen->add_option("--val-frac", sc.val_frac, "validation split fraction");

  // ---- train ----
  auto* tr = app.add_subcommand("train", "train a model");
  mmcnn::TrainConfig tc;
  std::string pairing_s = "loose", modality_s = "multimodal";
  std::string decay_epochs_s;
  int width = 16, input_size = 64;
  std::uint64_t train_seed = 0;
  tr->add_option("--config", config_path, "JSON config file; flags override");
  tr->add_option("--manifest", manifest_path, "dataset manifest CSV")->required();
  tr->add_option("--out-dir", out_dir, "output directory")->required();
  tr->add_option("--seed", train_seed, "RNG seed")->required();
  tr->add_option("--pairing", pairing_s, "strict|loose (multimodal only)");
  tr->add_option("--modality", modality_s, "multimodal|fundus|oct");
  tr->add_option("--lr", tc.lr, "learning rate");
  tr->add_option("--momentum", tc.momentum, "SGD momentum");
  tr->add_option("--weight-decay", tc.weight_decay, "L2 weight decay");
  tr->add_option("--batch-size", tc.batch_size, "batch size");
  tr->add_option("--epochs", tc.epochs, "epoch budget");
  tr->add_option("--lr-decay-epochs", decay_epochs_s,
                 "comma-separated epochs at which lr is scaled");
  tr->add_option("--lr-decay", tc.lr_decay, "lr decay factor");
  tr->add_option("--width", width, "backbone stem width");
  tr->add_option("--image-size", input_size, "network input side");
  bool no_augment = false;
  tr->add_flag("--no-augment", no_augment, "disable training augmentation");

  // ---- eval ----
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_split = "test", eval_modality;
  ev->add_option("--config", config_path, "JSON config file; flags override");
  ev->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
  ev->add_option("--manifest", manifest_path, "dataset manifest CSV")->required();
  ev->add_option("--out-dir", out_dir, "output directory")->required();
  ev->add_option("--split", eval_split, "train|val|test");
  ev->add_option("--modality", eval_modality,
                 "expected checkpoint modality (cross-check)");

  // ---- cam ----
  auto* cm = app.add_subcommand("cam", "export class activation maps");
  std::string ids_s, cam_class = "predicted";
  cm->add_option("--config", config_path, "JSON config file; flags override");
  cm->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
  cm->add_option("--manifest", manifest_path, "dataset manifest CSV")->required();
  cm->add_option("--out-dir", out_dir, "output directory")->required();
  cm->add_option("--ids", ids_s, "comma-separated eye ids")->required();
  cm->add_option("--class", cam_class, "predicted|given");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    json cfg = load_config_file(config_path);

    if (gen->parsed()) {
      apply_config(*gen, cfg, "--eyes-per-class", "eyes_per_class", sc.eyes_per_class);
      apply_config(*gen, cfg, "--image-size", "image_size", sc.image_size);
      apply_config(*gen, cfg, "--oct-min", "oct_min", sc.oct_min);
      apply_config(*gen, cfg, "--oct-max", "oct_max", sc.oct_max);
      apply_config(*gen, cfg, "--oct-missing-frac", "oct_missing_frac", sc.oct_missing_frac);
      apply_config(*gen, cfg, "--train-frac", "train_frac", sc.train_frac);
      apply_config(*gen, cfg, "--val-frac", "val_frac", sc.val_frac);
      sc.seed = gen_seed;
      sc.out_dir = out_dir;
      return cmd_gen_data(*gen, cfg, sc);
    }

    if (tr->parsed()) {
      apply_config(*tr, cfg, "--pairing", "pairing", pairing_s);
      apply_config(*tr, cfg, "--modality", "modality", modality_s);
      apply_config(*tr, cfg, "--lr", "lr", tc.lr);
      apply_config(*tr, cfg, "--momentum", "momentum", tc.momentum);
      apply_config(*tr, cfg, "--weight-decay", "weight_decay", tc.weight_decay);
      apply_config(*tr, cfg, "--batch-size", "batch_size", tc.batch_size);
      apply_config(*tr, cfg, "--epochs", "epochs", tc.epochs);
      apply_config(*tr, cfg, "--lr-decay", "lr_decay", tc.lr_decay);
      apply_config(*tr, cfg, "--width", "width", width);
      apply_config(*tr, cfg, "--image-size", "image_size", input_size);

      tc.modality = mmcnn::parse_modality(modality_s);
      if (tr->count("--pairing") == 0 && !cfg.contains("pairing") &&
          tc.modality != mmcnn::Modality::multimodal)
        pairing_s = "strict";  // pairing is a multimodal concept
      tc.pairing = mmcnn::parse_pairing(pairing_s);
      tc.seed = train_seed;
      tc.augmentation = !no_augment;

      if (tr->count("--lr-decay-epochs") > 0 || cfg.contains("lr_decay_epochs")) {
        apply_config(*tr, cfg, "--lr-decay-epochs", "lr_decay_epochs", decay_epochs_s);
        tc.lr_decay_epochs.clear();
        std::istringstream ss(decay_epochs_s);
        std::string tok;
        while (std::getline(ss, tok, ','))
          if (!tok.empty()) tc.lr_decay_epochs.push_back(std::stoi(tok));
      } else {
        // keep only defaults that fit the epoch budget
        std::erase_if(tc.lr_decay_epochs, [&](int e) { return e >= tc.epochs; });
      }

      mmcnn::BranchConfig bc;
      bc.width = width;
      bc.input_size = input_size;
      mmcnn::Manifest man = mmcnn::load_manifest(manifest_path);
      mmcnn::TwoStreamModel<float> model =
          tc.modality == mmcnn::Modality::multimodal
              ? mmcnn::build_model<float>(bc, 3, tc.seed)
              : mmcnn::build_single_modal<float>(bc, 3, tc.seed, tc.modality);
      mmcnn::TrainReport report = mmcnn::train(model, man, tc, out_dir);
      const auto& best = report.epochs[std::size_t(report.selected_epoch)];
      std::cout << "selected epoch " << report.selected_epoch
                << "  val F1 " << mmcnn::format3(best.val_f1)
                << "  val accuracy " << mmcnn::format3(best.val_accuracy) << "\n"
                << "checkpoint: " << report.checkpoint_path << "\n";
      return 0;
    }

    if (ev->parsed()) {
      mmcnn::TwoStreamModel<float> model = mmcnn::load_checkpoint(checkpoint_path);
      if (!eval_modality.empty() &&
          mmcnn::parse_modality(eval_modality) != model.modality)
        throw mmcnn::ConfigError("checkpoint modality is " +
                                 mmcnn::modality_name(model.modality) +
                                 ", not " + eval_modality);
      mmcnn::Manifest man = mmcnn::load_manifest(manifest_path);
      mmcnn::Split split = mmcnn::parse_split(eval_split);
      mmcnn::ImageCache cache(man, model.cfg.input_size);
      mmcnn::ConfusionMatrix conf(model.num_classes);
      if (model.modality == mmcnn::Modality::multimodal) {
        auto pairs = mmcnn::strict_pairs(man.records, split);
        conf = mmcnn::evaluate_pairs(model, cache, pairs);
      } else {
        auto items = mmcnn::single_items(man.records, split, model.modality);
        conf = mmcnn::evaluate_single(model, cache, items);
      }
      auto pc = mmcnn::per_class(conf);
      auto ov = mmcnn::overall(pc, conf);
      std::vector<std::string> names(mmcnn::kClassNames.begin(),
                                     mmcnn::kClassNames.end());
      std::cout << mmcnn::metrics_table(names, pc, ov);
      fs::create_directories(out_dir);
      std::ofstream jf(fs::path(out_dir) / "metrics.json", std::ios::binary);
      if (!jf) throw mmcnn::IoError("cannot write metrics.json in " + out_dir);
      jf << mmcnn::metrics_json(names, conf, pc, ov).dump(2) << "\n";
      return 0;
    }

    if (cm->parsed()) {
      if (cam_class != "predicted" && cam_class != "given")
        throw mmcnn::ConfigError("--class must be 'predicted' or 'given'");
      mmcnn::TwoStreamModel<float> model = mmcnn::load_checkpoint(checkpoint_path);
      mmcnn::Manifest man = mmcnn::load_manifest(manifest_path);
      fs::create_directories(out_dir);
      mmcnn::ImageCache cache(man, model.cfg.input_size);

      std::vector<std::string> ids;
      {
        std::istringstream ss(ids_s);
        std::string tok;
        while (std::getline(ss, tok, ','))
          if (!tok.empty()) ids.push_back(tok);
      }
      for (const auto& id : ids) {
        const mmcnn::EyeRecord* rec = nullptr;
        for (const auto& r : man.records)
          if (r.eye_id == id) rec = &r;
        if (!rec) {
          std::cerr << "unknown id '" << id << "'; valid ids:";
          for (const auto& r : man.records) std::cerr << " " << r.eye_id;
          std::cerr << "\n";
          return 2;
        }
        bool need_fundus = model.modality != mmcnn::Modality::oct;
        bool need_oct = model.modality != mmcnn::Modality::fundus;
        if ((need_fundus && rec->fundus.empty()) || (need_oct && rec->oct.empty()))
          throw mmcnn::ConfigError("eye " + id + " lacks an image for the checkpoint's modality");

        int s = model.cfg.input_size;
        mmcnn::Tensor<float> xf({1, 3, s, s}), xo({1, 3, s, s});
        mmcnn::Image base_f, base_o;
        if (need_fundus) {
          base_f = cache.get(rec->fundus[0], mmcnn::Modality::fundus);
          mmcnn::detail::fill_batch_slot(xf, 0, base_f);
        }
        if (need_oct) {
          base_o = cache.get(rec->oct[0], mmcnn::Modality::oct);
          mmcnn::detail::fill_batch_slot(xo, 0, base_o);
        }
        mmcnn::ForwardResult<float> r =
            model.modality == mmcnn::Modality::multimodal
                ? mmcnn::forward_multimodal(
                      model, xf, xo, false,
                      static_cast<mmcnn::Tape<float>*>(nullptr))
                : mmcnn::forward_single(
                      model, need_fundus ? xf : xo, false,
                      static_cast<mmcnn::Tape<float>*>(nullptr));
        int cls = cam_class == "given"
                      ? int(rec->label)
                      : mmcnn::argmax_scores(r.scores)[0];
        double score = r.scores[std::size_t(cls)];

        int c = model.cfg.feature_channels();
        int head_w = model.fusion_weights.dim(1);
        auto head_row = [&](int offset) {
          std::vector<float> w(std::size_t(c), 0.f);
          for (int i = 0; i < c; ++i)
            w[std::size_t(i)] =
                model.fusion_weights[std::size_t(cls) * head_w + offset + i];
          return w;
        };
        auto emit = [&](const mmcnn::BranchOutput<float>& out,
                        const std::string& modality, int offset,
                        const mmcnn::Image& base) {
          int m = model.cfg.final_map_side();
          mmcnn::Tensor<float> maps({c, m, m});
          std::copy_n(out.maps.data().begin(), maps.data().size(),
                      maps.data().begin());
          mmcnn::CamMap cam =
              mmcnn::compute_cam(maps, head_row(offset), modality, cls);
          auto up = mmcnn::upsample(cam, s);
          mmcnn::Image heat = mmcnn::render_heatmap(up, s);
          std::string stem = id + "." + modality + "." +
                             mmcnn::kClassNames[std::size_t(cls)];
          mmcnn::write_pnm(heat, (fs::path(out_dir) / (stem + ".cam.pgm")).string());
          mmcnn::write_pnm(mmcnn::render_overlay(heat, base),
                           (fs::path(out_dir) / (stem + ".overlay.ppm")).string());
          return mmcnn::cam_sum(cam);
        };

        double cam_total = 0;
        if (need_fundus) cam_total += emit(r.fundus, "fundus", 0, base_f);
        if (need_oct)
          cam_total += emit(r.oct, "oct", need_fundus ? c : 0, base_o);
        std::cout << id << " class=" << mmcnn::kClassNames[std::size_t(cls)]
                  << " score=" << score
                  << " residual=" << std::abs(score - cam_total) << "\n";
      }
      return 0;
    }
  } catch (const mmcnn::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const mmcnn::FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const mmcnn::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
