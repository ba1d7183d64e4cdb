#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mmcnn/image.hpp"
#include "mmcnn/model.hpp"
#include "mmcnn/rng.hpp"

namespace mmcnn {

enum class ClassLabel : int { normal = 0, dryAMD = 1, wetAMD = 2 };
enum class Split { train, val, test };
enum class PairOrigin { strict, loose };

inline ClassLabel parse_class(const std::string& s) {
  for (int i = 0; i < 3; ++i)
    if (s == kClassNames[std::size_t(i)]) return ClassLabel(i);
  throw ConfigError("unknown class: " + s);
}

inline std::string split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    default: return "test";
  }
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split: " + s);
}

// inclusive pixel box [x0,x1] x [y0,y1]
struct BBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

struct ImageRef {
  std::string path;  // relative to the manifest directory
  std::optional<BBox> bbox;
};

struct EyeRecord {
  std::string eye_id;
  ClassLabel label = ClassLabel::normal;
  Split split = Split::train;
  std::vector<ImageRef> fundus;
  std::vector<ImageRef> oct;
};

struct Manifest {
  std::vector<EyeRecord> records;
  std::string dir;  // directory image paths are relative to

  std::string resolve(const std::string& rel) const {
    return (std::filesystem::path(dir) / rel).string();
  }
};

struct TrainingPair {
  ImageRef fundus;
  ImageRef oct;
  ClassLabel label = ClassLabel::normal;
  PairOrigin origin = PairOrigin::strict;
  std::string eye_id;  // fundus eye (strict: both modalities' eye)
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline std::string bbox_to_string(const std::optional<BBox>& b) {
  if (!b) return "";
  std::ostringstream ss;
  ss << b->x0 << ":" << b->y0 << ":" << b->x1 << ":" << b->y1;
  return ss.str();
}

inline std::optional<BBox> parse_bbox(const std::string& s, int line_no) {
  if (s.empty()) return std::nullopt;
  BBox b;
  char c1, c2, c3;
  std::istringstream ss(s);
  if (!(ss >> b.x0 >> c1 >> b.y0 >> c2 >> b.x1 >> c3 >> b.y1) || c1 != ':' ||
      c2 != ':' || c3 != ':')
    throw FormatError("bad bbox '" + s + "' on line " + std::to_string(line_no),
                      0);
  return b;
}

}  // namespace detail

inline const char* kManifestHeader = "eye_id,class,modality,path,split,bbox";

// CSV manifest, one image per row, grouped into per-eye records. All rows of
// an eye must agree on class and split; duplicate (eye_id, path) is rejected.
inline Manifest load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open manifest: " + path);
  Manifest man;
  man.dir = std::filesystem::path(path).parent_path().string();
  if (man.dir.empty()) man.dir = ".";

  std::string line;
  if (!std::getline(f, line))
    throw FormatError("manifest is empty (missing header)", 0);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kManifestHeader)
    throw FormatError("bad manifest header '" + line + "'", 0);

  std::map<std::string, std::size_t> index;
  std::set<std::pair<std::string, std::string>> seen;
  int line_no = 1;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    auto cols = detail::split_csv_line(line);
    if (cols.size() != 6)
      throw FormatError("expected 6 columns on line " + std::to_string(line_no),
                        0);
    const std::string& eye_id = cols[0];
    ClassLabel label;
    Split split;
    try {
      label = parse_class(cols[1]);
      split = parse_split(cols[4]);
    } catch (const ConfigError& e) {
      throw FormatError(std::string(e.what()) + " on line " +
                            std::to_string(line_no),
                        0);
    }
    const std::string& modality = cols[2];
    if (modality != "fundus" && modality != "oct")
      throw FormatError("unknown modality '" + modality + "' on line " +
                            std::to_string(line_no),
                        0);
    if (cols[3].empty())
      throw FormatError("empty path on line " + std::to_string(line_no), 0);
    if (!seen.insert({eye_id, cols[3]}).second)
      throw FormatError("duplicate (eye_id, path) on line " +
                            std::to_string(line_no),
                        0);
    ImageRef ref{cols[3], detail::parse_bbox(cols[5], line_no)};

    auto it = index.find(eye_id);
    if (it == index.end()) {
      index[eye_id] = man.records.size();
      man.records.push_back(EyeRecord{eye_id, label, split, {}, {}});
      it = index.find(eye_id);
    } else {
      EyeRecord& r = man.records[it->second];
      if (r.label != label)
        throw FormatError("conflicting class for eye " + eye_id + " on line " +
                              std::to_string(line_no),
                          0);
      if (r.split != split)
        throw FormatError("conflicting split for eye " + eye_id + " on line " +
                              std::to_string(line_no),
                          0);
    }
    EyeRecord& r = man.records[it->second];
    if (modality == "fundus")
      r.fundus.push_back(std::move(ref));
    else
      r.oct.push_back(std::move(ref));
  }
  return man;
}

inline void save_manifest(const Manifest& man, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open manifest for writing: " + path);
  f << kManifestHeader << "\n";
  for (const auto& r : man.records) {
    auto write_refs = [&](const std::vector<ImageRef>& refs,
                          const char* modality) {
      for (const auto& ref : refs)
        f << r.eye_id << "," << kClassNames[std::size_t(int(r.label))] << ","
          << modality << "," << ref.path << "," << split_name(r.split) << ","
          << detail::bbox_to_string(ref.bbox) << "\n";
    };
    write_refs(r.fundus, "fundus");
    write_refs(r.oct, "oct");
  }
  if (!f) throw IoError("failed writing manifest: " + path);
}

// Every (fundus, oct) combination within each eye of the given split.
inline std::vector<TrainingPair> strict_pairs(
    const std::vector<EyeRecord>& records, Split split) {
  std::vector<TrainingPair> out;
  for (const auto& r : records) {
    if (r.split != split) continue;
    for (const auto& fr : r.fundus)
      for (const auto& orf : r.oct)
        out.push_back({fr, orf, r.label, PairOrigin::strict, r.eye_id});
  }
  return out;
}

struct LoosePairCounts {
  std::array<long long, 3> per_class = {0, 0, 0};
  std::array<bool, 3> empty_modality = {false, false, false};  // warning flags
};

// count_c = (#fundus images of class c) x (#OCT images of class c).
inline LoosePairCounts loose_pairs_count(const std::vector<EyeRecord>& records,
                                         Split split = Split::train) {
  std::array<long long, 3> nf = {0, 0, 0}, no = {0, 0, 0};
  for (const auto& r : records) {
    if (r.split != split) continue;
    nf[std::size_t(int(r.label))] += (long long)r.fundus.size();
    no[std::size_t(int(r.label))] += (long long)r.oct.size();
  }
  LoosePairCounts out;
  for (int c = 0; c < 3; ++c) {
    out.per_class[std::size_t(c)] = nf[std::size_t(c)] * no[std::size_t(c)];
    out.empty_modality[std::size_t(c)] =
        (nf[std::size_t(c)] == 0 || no[std::size_t(c)] == 0);
  }
  return out;
}

// One epoch of loose pairs: a shuffled pass over all training fundus images,
// each paired with an OCT image drawn uniformly from its class pool. Only
// valid on the training split.
inline std::vector<TrainingPair> loose_sampler(
    const std::vector<EyeRecord>& records, Split split, std::uint64_t seed,
    int epoch) {
  if (split != Split::train)
    throw ConfigError("loose_sampler: loose pairing is training-only");
  struct FundusEntry {
    const ImageRef* ref;
    ClassLabel label;
    const std::string* eye_id;
  };
  std::vector<FundusEntry> fundus;
  std::array<std::vector<const ImageRef*>, 3> oct_pool;
  for (const auto& r : records) {
    if (r.split != Split::train) continue;
    for (const auto& fr : r.fundus) fundus.push_back({&fr, r.label, &r.eye_id});
    for (const auto& orf : r.oct)
      oct_pool[std::size_t(int(r.label))].push_back(&orf);
  }
  RngStream shuffle_rng{seed, 0x100F, std::uint64_t(epoch)};
  shuffle_rng.shuffle(fundus);
  RngStream pick_rng{seed, 0x100E, std::uint64_t(epoch)};
  std::vector<TrainingPair> out;
  out.reserve(fundus.size());
  for (const auto& fe : fundus) {
    const auto& pool = oct_pool[std::size_t(int(fe.label))];
    if (pool.empty()) continue;  // class has no OCT images
    const ImageRef* o = pool[std::size_t(pick_rng.uniform_int(0, int(pool.size()) - 1))];
    out.push_back({*fe.ref, *o, fe.label, PairOrigin::loose, *fe.eye_id});
  }
  return out;
}

// ---- synthetic paired-modality dataset ----
//
// Fundus: class normal carries a bright disk; dryAMD and wetAMD carry an
// identically distributed ring, so fundus alone cannot split them.
// OCT: class wetAMD carries a bright horizontal bar; normal and dryAMD carry
// an identical stripe texture, so OCT alone cannot split them.

struct SynthConfig {
  int eyes_per_class = 50;
  int image_size = 64;
  int oct_min = 1, oct_max = 2;
  double oct_missing_frac = 0.3;
  double train_frac = 0.6, val_frac = 0.2;  // remainder is test
  std::uint64_t seed = 0;
  std::string out_dir;
};

namespace detail {

inline void add_noise_background(Image& img, RngStream& rng) {
  for (auto& v : img.data)
    v = float(std::clamp(0.5 + 0.1 * rng.normal(), 0.0, 1.0));
}

inline void clamp01(Image& img) {
  for (auto& v : img.data) v = std::clamp(v, 0.f, 1.f);
}

}  // namespace detail

// Generates images + manifest.csv under cfg.out_dir; returns the manifest.
// Discriminative patterns (disk on normal fundus, bar on wetAMD OCT) record
// their bounding boxes in the manifest for CAM localization checks.
inline Manifest synth_generate(const SynthConfig& cfg) {
  namespace fs = std::filesystem;
  if (cfg.image_size < 32)
    throw ConfigError("synth_generate: image_size must be >= 32");
  if (cfg.eyes_per_class < 1)
    throw ConfigError("synth_generate: eyes_per_class must be >= 1");
  if (cfg.train_frac < 0 || cfg.val_frac < 0 ||
      cfg.train_frac + cfg.val_frac > 1.0)
    throw ConfigError("synth_generate: bad split fractions");
  std::error_code ec;
  fs::create_directories(fs::path(cfg.out_dir) / "images", ec);
  if (ec) throw IoError("cannot create output directory: " + cfg.out_dir);

  int s = cfg.image_size;
  Manifest man;
  man.dir = cfg.out_dir;

  int n_train = int(cfg.train_frac * cfg.eyes_per_class + 0.5);
  int n_val = int(cfg.val_frac * cfg.eyes_per_class + 0.5);
  n_val = std::min(n_val, cfg.eyes_per_class - n_train);

  for (int cls = 0; cls < 3; ++cls) {
    for (int e = 0; e < cfg.eyes_per_class; ++e) {
      RngStream rng{cfg.seed, std::uint64_t(cls), std::uint64_t(e)};
      EyeRecord rec;
      rec.label = ClassLabel(cls);
      rec.eye_id = kClassNames[std::size_t(cls)] + "_" + std::to_string(e);
      rec.split = e < n_train ? Split::train
                  : e < n_train + n_val ? Split::val
                                        : Split::test;

      // fundus image (color)
      Image fundus(s, s, 3);
      detail::add_noise_background(fundus, rng);
      std::optional<BBox> fundus_box;
      if (cls == 0) {
        // bright disk, radius s/8, fully inside the frame
        int r = s / 8;
        int cx = rng.uniform_int(r + 2, s - r - 3);
        int cy = rng.uniform_int(r + 2, s - r - 3);
        for (int y = cy - r; y <= cy + r; ++y)
          for (int x = cx - r; x <= cx + r; ++x)
            if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r)
              for (int c = 0; c < 3; ++c) fundus.at(c, y, x) += 0.7f;
        fundus_box = BBox{cx - r, cy - r, cx + r, cy + r};
      } else {
        // ring, identically distributed for dryAMD and wetAMD
        int ro = s / 6, ri = ro - s / 16;
        int cx = rng.uniform_int(ro + 2, s - ro - 3);
        int cy = rng.uniform_int(ro + 2, s - ro - 3);
        for (int y = cy - ro; y <= cy + ro; ++y)
          for (int x = cx - ro; x <= cx + ro; ++x) {
            int d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            if (d2 <= ro * ro && d2 >= ri * ri)
              for (int c = 0; c < 3; ++c) fundus.at(c, y, x) += 0.7f;
          }
      }
      detail::clamp01(fundus);
      std::string fname = "images/" + rec.eye_id + "_fundus.ppm";
      write_pnm(fundus, (fs::path(cfg.out_dir) / fname).string());
      rec.fundus.push_back({fname, fundus_box});

      // OCT images (grayscale)
      int n_oct = rng.uniform_int(cfg.oct_min, cfg.oct_max);
      if (rng.bernoulli(cfg.oct_missing_frac)) n_oct = 0;
      for (int k = 0; k < n_oct; ++k) {
        Image oct(s, s, 1);
        detail::add_noise_background(oct, rng);
        std::optional<BBox> oct_box;
        if (cls == 2) {
          // bright horizontal bar, height s/16, at a random vertical offset
          int bh = s / 16;
          int y0 = rng.uniform_int(2, s - bh - 3);
          for (int y = y0; y < y0 + bh; ++y)
            for (int x = 0; x < s; ++x) oct.at(0, y, x) += 0.7f;
          oct_box = BBox{0, y0, s - 1, y0 + bh - 1};
        } else {
          // vertical stripe texture, identical for normal and dryAMD
          double phase = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
          for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x)
              oct.at(0, y, x) +=
                  0.22f * float(std::sin(2.0 * 3.14159265358979323846 *
                                             double(x) / (double(s) / 6.0) +
                                         phase));
        }
        detail::clamp01(oct);
        std::string oname =
            "images/" + rec.eye_id + "_oct" + std::to_string(k) + ".pgm";
        write_pnm(oct, (fs::path(cfg.out_dir) / oname).string());
        rec.oct.push_back({oname, oct_box});
      }
      man.records.push_back(std::move(rec));
    }
  }
  save_manifest(man, (fs::path(cfg.out_dir) / "manifest.csv").string());
  return man;
}

}  // namespace mmcnn
