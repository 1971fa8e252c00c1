#pragma once

// Synthetic moving-shapes video plus corpus directory handling.
//
// Four motion classes: 0 right-drift, 1 left-drift, 2 down-drift, 3 static.
// A colored rectangle translates 1 pixel per frame over a static textured
// background, wrapping toroidally, so start position, color, and size have
// identical distributions across classes and only motion separates them.

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mam2/common.hpp"
#include "mam2/rng.hpp"
#include "mam2/tensor.hpp"
#include "mam2/tensor_io.hpp"

namespace mam2 {

struct VideoClip {
  TensorF frames;  // [T,3,H,W], values in [0,1]
  int64_t label = -1;
  int64_t source_stride = 1;

  int64_t t() const { return frames.dim(0); }
  int64_t h() const { return frames.dim(2); }
  int64_t w() const { return frames.dim(3); }
};

template <class S>
Tensor<S> frames_as(const VideoClip& clip) {
  std::vector<S> v(clip.frames.values().begin(), clip.frames.values().end());
  return Tensor<S>(clip.frames.shape(), std::move(v));
}

// Everything random about one clip except its motion class: the motion
// vector is chosen by class_id without consuming draws, so clips with the
// same seed but different classes share background, color, size, position.
struct Scene {
  std::vector<float> background;  // [3,H,W]
  float color[3];
  int64_t sh, sw;  // rectangle extent
  int64_t sy, sx;  // top-left at t=0
};

namespace detail {

inline Scene draw_scene(Rng& rng, int64_t H, int64_t W) {
  Scene s;
  // static background: bilinear ramp over a coarse random grid + fine noise
  const int64_t cell = 8;
  int64_t gh = (H + cell - 1) / cell + 1, gw = (W + cell - 1) / cell + 1;
  std::vector<float> coarse(size_t(gh * gw * 3));
  for (auto& v : coarse) v = float(rng.uniform());
  s.background.resize(size_t(3 * H * W));
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      int64_t cy = y / cell, cx = x / cell;
      float fy = float(y % cell) / float(cell), fx = float(x % cell) / float(cell);
      for (int64_t c = 0; c < 3; ++c) {
        auto at = [&](int64_t yy, int64_t xx) { return coarse[size_t((yy * gw + xx) * 3 + c)]; };
        float v = (1 - fy) * ((1 - fx) * at(cy, cx) + fx * at(cy, cx + 1)) +
                  fy * ((1 - fx) * at(cy + 1, cx) + fx * at(cy + 1, cx + 1));
        s.background[size_t((c * H + y) * W + x)] = 0.15f + 0.7f * v;
      }
    }
  for (auto& v : s.background) {
    v += float(0.08 * (rng.uniform() - 0.5));
    v = std::min(1.0f, std::max(0.0f, v));
  }
  int64_t dominant = rng.below(3);
  for (int64_t c = 0; c < 3; ++c)
    s.color[c] = (c == dominant) ? float(0.85 + 0.15 * rng.uniform()) : float(0.25 * rng.uniform());
  s.sh = H / 5 + rng.below(std::max<int64_t>(1, H / 10));
  s.sw = W / 5 + rng.below(std::max<int64_t>(1, W / 10));
  s.sy = rng.below(H);
  s.sx = rng.below(W);
  return s;
}

inline uint64_t scene_seed(uint64_t seed, int64_t T, int64_t H, int64_t W) {
  return derive_seed(seed, {0x7669644full, uint64_t(T), uint64_t(H), uint64_t(W)});
}

}  // namespace detail

// the geometry a given seed produces, for tests and debugging
inline Scene scene_of(uint64_t seed, int64_t T, int64_t H, int64_t W) {
  Rng rng(detail::scene_seed(seed, T, H, W));
  return detail::draw_scene(rng, H, W);
}

inline void motion_of(int64_t class_id, int64_t& dy, int64_t& dx) {
  dy = dx = 0;
  if (class_id == 0) dx = 1;
  if (class_id == 1) dx = -1;
  if (class_id == 2) dy = 1;
}

inline VideoClip generate_moving_shapes(uint64_t seed, int64_t class_id, int64_t T, int64_t H,
                                        int64_t W) {
  if (class_id < 0 || class_id > 3)
    throw UsageError("generate_moving_shapes: class " + std::to_string(class_id) +
                     " not in {0,1,2,3}");
  if (H < 16 || W < 16) throw UsageError("generate_moving_shapes: frame must be at least 16x16");
  if (T < 2) throw UsageError("generate_moving_shapes: need at least 2 frames");

  Rng rng(detail::scene_seed(seed, T, H, W));
  Scene s = detail::draw_scene(rng, H, W);
  int64_t dy, dx;
  motion_of(class_id, dy, dx);

  VideoClip clip;
  clip.frames = TensorF({T, 3, H, W});
  clip.label = class_id;
  float* out = clip.frames.values().data();
  for (int64_t t = 0; t < T; ++t) {
    float* frame = out + t * 3 * H * W;
    std::copy(s.background.begin(), s.background.end(), frame);
    int64_t oy = ((s.sy + t * dy) % H + H) % H;
    int64_t ox = ((s.sx + t * dx) % W + W) % W;
    for (int64_t i = 0; i < s.sh; ++i)
      for (int64_t j = 0; j < s.sw; ++j) {
        int64_t y = (oy + i) % H, x = (ox + j) % W;
        for (int64_t c = 0; c < 3; ++c) frame[(c * H + y) * W + x] = s.color[c];
      }
  }
  return clip;
}

inline VideoClip sample_clip(const VideoClip& src, int64_t start, int64_t stride, int64_t T) {
  if (start < 0 || stride < 1 || T < 1)
    throw UsageError("sample_clip: start >= 0, stride >= 1, T >= 1 required");
  int64_t have = src.t();
  int64_t need = start + (T - 1) * stride + 1;
  if (need > have)
    throw RangeError("sample_clip: requires >= " + std::to_string(need) + " source frames, have " +
                     std::to_string(have));
  int64_t H = src.h(), W = src.w();
  VideoClip out;
  out.frames = TensorF({T, 3, H, W});
  out.label = src.label;
  out.source_stride = stride;
  const float* in = src.frames.values().data();
  float* dst = out.frames.values().data();
  int64_t fsz = 3 * H * W;
  for (int64_t t = 0; t < T; ++t)
    std::copy(in + (start + t * stride) * fsz, in + (start + t * stride + 1) * fsz, dst + t * fsz);
  return out;
}

// ---- corpus layout: clips/{split}/{index}.tnsr + labels.csv per split ----

struct CorpusSpec {
  uint64_t seed = 1;
  int64_t train_clips = 64;
  int64_t val_clips = 32;
  int64_t T = 8;
  int64_t H = 32;
  int64_t W = 32;
  int64_t stride = 1;
  int64_t classes = 4;
};

inline int64_t split_tag(const std::string& split) {
  if (split == "train") return 0;
  if (split == "val") return 1;
  throw UsageError("unknown split: " + split);
}

inline uint64_t clip_seed(uint64_t corpus_seed, const std::string& split, int64_t index,
                          int64_t epoch) {
  return derive_seed(corpus_seed, {uint64_t(split_tag(split)), uint64_t(index), uint64_t(epoch)});
}

// Builds one clip of the corpus: source video at stride-expanded length,
// then strided sampling. epoch 0 is what make_corpus stores on disk;
// later epochs give the fresh-clips variants used during training.
inline VideoClip corpus_clip(const CorpusSpec& spec, const std::string& split, int64_t index,
                             int64_t class_id, int64_t epoch) {
  int64_t source_frames = (spec.T - 1) * spec.stride + 1;
  VideoClip source = generate_moving_shapes(clip_seed(spec.seed, split, index, epoch), class_id,
                                            std::max<int64_t>(source_frames, 2), spec.H, spec.W);
  return sample_clip(source, 0, spec.stride, spec.T);
}

inline std::string split_dir(const std::string& root, const std::string& split) {
  return root + "/clips/" + split;
}

inline std::string clip_path(const std::string& root, const std::string& split, int64_t index) {
  return split_dir(root, split) + "/" + std::to_string(index) + ".tnsr";
}

inline std::string flow_path(const std::string& root, const std::string& split, int64_t index) {
  return split_dir(root, split) + "/" + std::to_string(index) + ".flow.tnsr";
}

// Ground-truth displacement field for a stored clip: the rectangle's pixels
// at sampled frame t carry (u,v) = (dx,dy) * stride, everything else is
// still. Written as [T-1,2,H,W] next to the clip.
inline void write_clip_flow(const std::string& root, const std::string& split, int64_t index,
                            int64_t class_id, const CorpusSpec& spec) {
  int64_t source_frames = std::max<int64_t>((spec.T - 1) * spec.stride + 1, 2);
  Scene s = scene_of(clip_seed(spec.seed, split, index, 0), source_frames, spec.H, spec.W);
  int64_t dy, dx;
  motion_of(class_id, dy, dx);
  int64_t H = spec.H, W = spec.W;
  TensorF flow({spec.T - 1, 2, H, W});
  float* out = flow.values().data();
  for (int64_t t = 0; t + 1 < spec.T; ++t) {
    int64_t f = t * spec.stride;  // source frame the sampled frame t came from
    int64_t oy = ((s.sy + f * dy) % H + H) % H;
    int64_t ox = ((s.sx + f * dx) % W + W) % W;
    float* u = out + (t * 2 + 0) * H * W;
    float* v = out + (t * 2 + 1) * H * W;
    for (int64_t i = 0; i < s.sh; ++i)
      for (int64_t j = 0; j < s.sw; ++j) {
        int64_t y = (oy + i) % H, x = (ox + j) % W;
        u[y * W + x] = float(dx * spec.stride);
        v[y * W + x] = float(dy * spec.stride);
      }
  }
  write_tensor(flow_path(root, split, index), flow);
}

inline void write_corpus_meta(const std::string& root, const CorpusSpec& spec) {
  std::ofstream os(root + "/corpus.txt");
  if (!os) throw FormatError("cannot write corpus meta in " + root);
  os << "seed = " << spec.seed << "\n"
     << "train_clips = " << spec.train_clips << "\n"
     << "val_clips = " << spec.val_clips << "\n"
     << "T = " << spec.T << "\n"
     << "H = " << spec.H << "\n"
     << "W = " << spec.W << "\n"
     << "stride = " << spec.stride << "\n"
     << "classes = " << spec.classes << "\n";
}

inline CorpusSpec read_corpus_meta(const std::string& root) {
  std::ifstream is(root + "/corpus.txt");
  if (!is) throw FormatError("missing corpus.txt in " + root);
  CorpusSpec spec;
  std::string line;
  while (std::getline(is, line)) {
    auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      size_t a = s.find_first_not_of(" \t\r");
      size_t b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    std::string key = trim(line.substr(0, eq)), val = trim(line.substr(eq + 1));
    if (key == "seed") spec.seed = std::stoull(val);
    else if (key == "train_clips") spec.train_clips = std::stoll(val);
    else if (key == "val_clips") spec.val_clips = std::stoll(val);
    else if (key == "T") spec.T = std::stoll(val);
    else if (key == "H") spec.H = std::stoll(val);
    else if (key == "W") spec.W = std::stoll(val);
    else if (key == "stride") spec.stride = std::stoll(val);
    else if (key == "classes") spec.classes = std::stoll(val);
  }
  return spec;
}

inline void make_corpus(const std::string& root, const CorpusSpec& spec,
                        bool with_flow = false) {
  namespace fs = std::filesystem;
  for (const std::string split : {"train", "val"}) {
    fs::create_directories(split_dir(root, split));
    int64_t count = split == "train" ? spec.train_clips : spec.val_clips;
    std::ofstream labels(split_dir(root, split) + "/labels.csv");
    if (!labels) throw FormatError("cannot write labels.csv in " + split_dir(root, split));
    labels << "index,class_id\n";
    for (int64_t i = 0; i < count; ++i) {
      int64_t class_id = i % spec.classes;
      VideoClip clip = corpus_clip(spec, split, i, class_id, 0);
      write_tensor(clip_path(root, split, i), clip.frames);
      if (with_flow) write_clip_flow(root, split, i, class_id, spec);
      labels << i << "," << class_id << "\n";
    }
  }
  write_corpus_meta(root, spec);
}

// index -> class id, in file order
inline std::vector<std::pair<int64_t, int64_t>> read_labels(const std::string& root,
                                                            const std::string& split) {
  split_tag(split);  // validates the split name
  std::string path = split_dir(root, split) + "/labels.csv";
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open " + path);
  std::vector<std::pair<int64_t, int64_t>> out;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    if (lineno == 1 && line.rfind("index", 0) == 0) continue;  // header
    auto comma = line.find(',');
    if (comma == std::string::npos)
      throw FormatError(path + ":" + std::to_string(lineno) + ": expected index,class_id");
    try {
      out.emplace_back(std::stoll(line.substr(0, comma)), std::stoll(line.substr(comma + 1)));
    } catch (const std::exception&) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": expected index,class_id");
    }
  }
  return out;
}

inline VideoClip load_clip(const std::string& root, const std::string& split, int64_t index,
                           int64_t label, int64_t stride = 1) {
  VideoClip clip;
  clip.frames = read_tensor<float>(clip_path(root, split, index));
  if (clip.frames.rank() != 4 || clip.frames.dim(1) != 3)
    throw FormatError("clip " + clip_path(root, split, index) + " is not [T,3,H,W]");
  clip.label = label;
  clip.source_stride = stride;
  return clip;
}

}  // namespace mam2
