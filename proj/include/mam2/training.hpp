#pragma once
// Run configuration, the pre-training step and loop, checkpointing, the
// linear probe, the query-leakage probe, and the ablation harness.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mam2/losses.hpp"
#include "mam2/model.hpp"
#include "mam2/optim.hpp"
#include "mam2/video.hpp"

namespace mam2 {

// ---- run configuration ----

struct TrainConfig {
  ModelConfig model;

  MaskKind mask_kind = MaskKind::tube;
  double mask_ratio = 0.75;
  int64_t cube_block = 2;
  MseReduction mse_reduction = MseReduction::patch_mean;
  double alpha = 2.0;
  std::string tokenizer = "grid16384";

  double base_lr = 1.5e-4;
  int64_t batch_size = 8;
  int64_t total_epochs = 10;
  int64_t warmup_epochs = 1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.05;

  uint64_t seed = 1;
  std::string data;
  std::string out;
  int64_t stride = 0;  // 0 keeps the corpus stride; >0 resamples fresh clips at this stride
  bool fresh_clips = true;
  int64_t checkpoint_every = 100;
};

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw UsageError("config: " + key + " wants true/false, got '" + v + "'");
}

// one key=value assignment; every field of TrainConfig is reachable
inline void apply_setting(TrainConfig& t, const std::string& key, const std::string& value) {
  auto want_i64 = [&](int64_t lo) {
    int64_t v;
    try {
      v = std::stoll(value);
    } catch (const std::exception&) {
      throw UsageError("config: " + key + " wants an integer, got '" + value + "'");
    }
    if (v < lo)
      throw UsageError("config: " + key + " must be >= " + std::to_string(lo));
    return v;
  };
  auto want_f64 = [&] {
    try {
      return std::stod(value);
    } catch (const std::exception&) {
      throw UsageError("config: " + key + " wants a number, got '" + value + "'");
    }
  };
  auto want_u64 = [&] {
    try {
      return std::stoull(value);
    } catch (const std::exception&) {
      throw UsageError("config: " + key + " wants an unsigned integer, got '" + value + "'");
    }
  };

  if (key == "preset") t.model = model_preset(value);
  else if (key == "frames") t.model.frames = want_i64(2);
  else if (key == "image_size") t.model.image_size = want_i64(1);
  else if (key == "patch_size") t.model.patch_size = want_i64(1);
  else if (key == "width") t.model.width = want_i64(1);
  else if (key == "heads") t.model.heads = want_i64(1);
  else if (key == "mlp_ratio") t.model.mlp_ratio = want_i64(1);
  else if (key == "enc_depth") t.model.enc_depth = want_i64(1);
  else if (key == "reg_depth") t.model.reg_depth = want_i64(1);
  else if (key == "dec_app_depth") t.model.dec_app_depth = want_i64(1);
  else if (key == "dec_mot_depth") t.model.dec_mot_depth = want_i64(0);
  else if (key == "vocab") t.model.vocab = want_i64(2);
  else if (key == "reg_width") t.model.reg_width = want_i64(0);
  else if (key == "joint_decoder") t.model.joint_decoder = parse_bool(value, key);
  else if (key == "motion") t.model.motion = motion_kind_from(value);
  else if (key == "mask_kind") t.mask_kind = mask_kind_from(value);
  else if (key == "mask_ratio") t.mask_ratio = want_f64();
  else if (key == "cube_block") t.cube_block = want_i64(1);
  else if (key == "mse_reduction") t.mse_reduction = mse_reduction_from(value);
  else if (key == "alpha") t.alpha = want_f64();
  else if (key == "tokenizer") t.tokenizer = value;
  else if (key == "base_lr") t.base_lr = want_f64();
  else if (key == "batch_size") t.batch_size = want_i64(1);
  else if (key == "total_epochs") t.total_epochs = want_i64(1);
  else if (key == "warmup_epochs") t.warmup_epochs = want_i64(0);
  else if (key == "beta1") t.beta1 = want_f64();
  else if (key == "beta2") t.beta2 = want_f64();
  else if (key == "weight_decay") t.weight_decay = want_f64();
  else if (key == "seed") t.seed = want_u64();
  else if (key == "data") t.data = value;
  else if (key == "out") t.out = value;
  else if (key == "stride") t.stride = want_i64(0);
  else if (key == "fresh_clips") t.fresh_clips = parse_bool(value, key);
  else if (key == "checkpoint_every") t.checkpoint_every = want_i64(1);
  else throw UsageError("config: unknown key '" + key + "'");
}

// flat `key = value` lines; # starts a comment
inline TrainConfig parse_train_config(std::istream& is, TrainConfig t = {}) {
  std::string line;
  int64_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto trim = [](std::string s) {
      size_t a = s.find_first_not_of(" \t\r");
      size_t b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    std::string stripped = trim(line);
    if (stripped.empty()) continue;
    auto eq = stripped.find('=');
    if (eq == std::string::npos)
      throw UsageError("config line " + std::to_string(lineno) + ": expected key = value");
    apply_setting(t, trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)));
  }
  return t;
}

inline TrainConfig load_train_config(const std::string& path, TrainConfig t = {}) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open config " + path);
  return parse_train_config(is, std::move(t));
}

inline void write_train_config(const std::string& path, const TrainConfig& t) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write config " + path);
  os << std::setprecision(17);
  os << "frames = " << t.model.frames << "\n"
     << "image_size = " << t.model.image_size << "\n"
     << "patch_size = " << t.model.patch_size << "\n"
     << "width = " << t.model.width << "\n"
     << "heads = " << t.model.heads << "\n"
     << "mlp_ratio = " << t.model.mlp_ratio << "\n"
     << "enc_depth = " << t.model.enc_depth << "\n"
     << "reg_depth = " << t.model.reg_depth << "\n"
     << "dec_app_depth = " << t.model.dec_app_depth << "\n"
     << "dec_mot_depth = " << t.model.dec_mot_depth << "\n"
     << "vocab = " << t.model.vocab << "\n"
     << "reg_width = " << t.model.reg_width << "\n"
     << "joint_decoder = " << (t.model.joint_decoder ? "true" : "false") << "\n"
     << "motion = " << motion_kind_name(t.model.motion) << "\n"
     << "mask_kind = " << mask_kind_name(t.mask_kind) << "\n"
     << "mask_ratio = " << t.mask_ratio << "\n"
     << "cube_block = " << t.cube_block << "\n"
     << "mse_reduction = " << mse_reduction_name(t.mse_reduction) << "\n"
     << "alpha = " << t.alpha << "\n"
     << "tokenizer = " << t.tokenizer << "\n"
     << "base_lr = " << t.base_lr << "\n"
     << "batch_size = " << t.batch_size << "\n"
     << "total_epochs = " << t.total_epochs << "\n"
     << "warmup_epochs = " << t.warmup_epochs << "\n"
     << "beta1 = " << t.beta1 << "\n"
     << "beta2 = " << t.beta2 << "\n"
     << "weight_decay = " << t.weight_decay << "\n"
     << "seed = " << t.seed << "\n"
     << "data = " << t.data << "\n"
     << "out = " << t.out << "\n"
     << "stride = " << t.stride << "\n"
     << "fresh_clips = " << (t.fresh_clips ? "true" : "false") << "\n"
     << "checkpoint_every = " << t.checkpoint_every << "\n";
}

inline void validate_train_config(const TrainConfig& t) {
  validate_config(t.model);
  if (t.mask_ratio < 0.0 || t.mask_ratio > 1.0)
    throw UsageError("mask_ratio outside [0,1]");
  if (t.warmup_epochs >= t.total_epochs)
    throw UsageError("warmup_epochs must be smaller than total_epochs");
  if (!std::isfinite(t.alpha)) throw UsageError("alpha must be finite");
  if (!(t.base_lr > 0.0)) throw UsageError("base_lr must be positive");
  if (t.beta1 < 0.0 || t.beta1 >= 1.0 || t.beta2 < 0.0 || t.beta2 >= 1.0)
    throw UsageError("betas must lie in [0,1)");
  if (t.weight_decay < 0.0) throw UsageError("weight_decay must be nonnegative");
  if (t.stride > 0 && !t.fresh_clips)
    throw UsageError("stride override resamples clips, which needs fresh_clips = true");
}

// ---- one pre-training step's forward pass ----

template <class S>
struct PretrainOut {
  LossBundle<S> bundle;            // batch means; total carries the graph
  std::vector<Tensor<S>> latents;  // regressed latents per clip, [1, M, rw]
};

inline MaskSpec draw_mask(const TrainConfig& t, uint64_t seed) {
  if (t.mask_kind == MaskKind::tube)
    return tube_mask(t.model.sites(), t.model.frames, t.mask_ratio, seed);
  return cube_mask(t.model.grid_side(), t.model.grid_side(), t.model.frames, t.mask_ratio,
                   t.cube_block, seed);
}

// Per clip: mask, encode the visible patches, regress latents for the
// masked ones, decode both heads, and form all objectives. Losses are
// averaged over the batch in clip order. seeds[i] = {mask draw, clip-order
// draw} for clip i; flow_files are required only when training on flow.
template <class S>
PretrainOut<S> forward_pretrain(const TrainConfig& t, const ModelParams<S>& p,
                                const std::vector<VideoClip>& batch,
                                const std::vector<std::array<uint64_t, 2>>& seeds,
                                const Tokenizer& tok,
                                const std::vector<std::string>* flow_files = nullptr) {
  const ModelConfig& c = t.model;
  int64_t B = int64_t(batch.size());
  if (B < 1) throw UsageError("forward_pretrain: empty batch");
  if (seeds.size() != batch.size())
    throw UsageError("forward_pretrain: one seed pair per clip required");
  if (c.motion == MotionKind::flow &&
      (flow_files == nullptr || flow_files->size() != batch.size()))
    throw UsageError("forward_pretrain: flow training needs one flow file per clip");

  PretrainOut<S> out;
  Tensor<S> app_sum, mot_sum, ali_sum;
  for (int64_t i = 0; i < B; ++i) {
    const VideoClip& clip = batch[size_t(i)];
    if (clip.t() != c.frames || clip.h() != c.image_size || clip.w() != c.image_size)
      throw UsageError("forward_pretrain: clip " + shape_str(clip.frames.shape()) +
                       " does not match the configured model input");
    MaskSpec mask = draw_mask(t, seeds[size_t(i)][0]);
    auto grid = patchify(frames_as<S>(clip), c.patch_size);

    auto enc = encode_visible(c, p, grid, mask);
    auto r = regress(c, p, enc.tokens, mask);
    out.latents.push_back(r);

    auto target = alignment_targets(c, p, grid, mask);
    auto ali = alignment_loss(reshape(r, {mask.masked_total(), c.rw()}), target);

    auto logits = decode_appearance(c, p, r, mask);
    auto ids = tokens_at(token_targets(clip, c.patch_size, tok), mask.positions(), c.vocab);
    auto app = appearance_loss(logits, ids);

    Tensor<S> mot;
    if (c.motion == MotionKind::rgb_diff || c.motion == MotionKind::flow) {
      auto tgt = c.motion == MotionKind::rgb_diff
                     ? rgb_diff_target<S>(clip, mask, c.patch_size)
                     : load_flow_target<S>((*flow_files)[size_t(i)], mask, c.patch_size);
      auto pred = decode_motion(c, p, r, mask);
      mot = motion_loss(pred, reshape(tgt.diffs, pred.shape()), t.mse_reduction);
    } else if (c.motion == MotionKind::clip_order) {
      auto order = decode_clip_order_seeded(c, p, r, mask, seeds[size_t(i)][1]);
      auto labels = std::vector<int64_t>(size_t(order.logits.dim(0)), order.label);
      mot = cross_entropy_mean(order.logits, labels);
    } else {
      mot = Tensor<S>::scalar(S(0));
    }

    app_sum = i == 0 ? app : add(app_sum, app);
    mot_sum = i == 0 ? mot : add(mot_sum, mot);
    ali_sum = i == 0 ? ali : add(ali_sum, ali);
  }
  double inv = 1.0 / double(B);
  out.bundle = hybrid_loss(scale(app_sum, inv), scale(mot_sum, inv), scale(ali_sum, inv),
                           t.alpha);
  return out;
}

// ---- checkpoints: one TensorFile per parameter plus a manifest ----

template <class S>
void save_checkpoint(const std::string& dir, const NamedParams<S>& params,
                     const AdamW<S>& opt, int64_t step) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ostringstream manifest;
  manifest << "step " << step << "\n";
  manifest << "params " << params.size() << "\n";
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& [name, p] = params[i];
    std::string stem = "p" + std::to_string(i);
    write_tensor(dir + "/" + stem + ".tnsr", p);
    write_tensor(dir + "/m" + std::to_string(i) + ".tnsr",
                 Tensor<S>({p.numel()}, std::vector<S>(opt.moments1()[i])));
    write_tensor(dir + "/v" + std::to_string(i) + ".tnsr",
                 Tensor<S>({p.numel()}, std::vector<S>(opt.moments2()[i])));
    manifest << name << " " << shape_str(p.shape()) << " " << stem << ".tnsr\n";
  }
  std::ofstream os(dir + "/manifest.txt");
  if (!os) throw FormatError("cannot write manifest in " + dir);
  os << manifest.str();
}

// loads values into already-constructed parameters, validating the name
// order and shapes against the manifest; returns the stored step
template <class S>
int64_t load_checkpoint(const std::string& dir, NamedParams<S>& params,
                        AdamW<S>* opt = nullptr) {
  std::ifstream is(dir + "/manifest.txt");
  if (!is) throw FormatError("missing manifest in " + dir);
  std::string word;
  int64_t step = -1, count = -1;
  if (!(is >> word >> step) || word != "step")
    throw FormatError(dir + "/manifest.txt: expected 'step N'");
  if (!(is >> word >> count) || word != "params")
    throw FormatError(dir + "/manifest.txt: expected 'params N'");
  if (count != int64_t(params.size()))
    throw FormatError(dir + " holds " + std::to_string(count) + " parameters, model has " +
                      std::to_string(params.size()));
  std::string name, shape, file;
  std::vector<std::vector<S>> m, v;
  for (size_t i = 0; i < params.size(); ++i) {
    if (!(is >> name >> shape >> file))
      throw FormatError(dir + "/manifest.txt: truncated at entry " + std::to_string(i));
    if (name != params[i].first)
      throw FormatError(dir + ": parameter " + std::to_string(i) + " is '" + name +
                        "', model wants '" + params[i].first + "'");
    auto stored = read_tensor<S>(dir + "/" + file);
    check_same_shape(stored.shape(), params[i].second.shape(), "load_checkpoint");
    params[i].second.values() = stored.values();
    if (opt != nullptr) {
      m.push_back(read_tensor<S>(dir + "/m" + std::to_string(i) + ".tnsr").values());
      v.push_back(read_tensor<S>(dir + "/v" + std::to_string(i) + ".tnsr").values());
    }
  }
  if (opt != nullptr) opt->restore(std::move(m), std::move(v), step);
  return step;
}

inline std::vector<std::pair<int64_t, std::string>> list_checkpoints(const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::vector<std::pair<int64_t, std::string>> found;
  if (!fs::exists(out_dir)) return found;
  for (const auto& e : fs::directory_iterator(out_dir)) {
    std::string base = e.path().filename().string();
    if (!e.is_directory() || base.rfind("ckpt_", 0) != 0) continue;
    try {
      found.emplace_back(std::stoll(base.substr(5)), e.path().string());
    } catch (const std::exception&) {
    }
  }
  std::sort(found.begin(), found.end());
  return found;
}

inline void prune_checkpoints(const std::string& out_dir, int64_t keep = 2) {
  auto found = list_checkpoints(out_dir);
  for (size_t i = 0; i + size_t(keep) < found.size(); ++i)
    std::filesystem::remove_all(found[i].second);
}

// ---- the pre-training loop ----

struct RunReport {
  std::string metrics_csv;
  std::string last_checkpoint;
  int64_t steps = 0;
  double first10_total = 0.0;  // mean L_total over the first 10 steps
  double last10_total = 0.0;   // and over the final 10
};

inline int64_t steps_per_epoch(int64_t clips, int64_t batch) {
  return std::max<int64_t>(1, clips / batch);
}

namespace detail {

inline std::string csv_num(double v) {
  std::ostringstream os;
  os << std::setprecision(12) << v;
  return os.str();
}

}  // namespace detail

// Deterministic per seed: parameter init, the mask/shuffle stream, and the
// clip schedule all derive from cfg.seed. Randomness is drawn from one
// stream in a fixed order: for each step, for each clip in batch order,
// first the mask seed, then the clip-order shuffle seed.
template <class S = float>
RunReport run_pretrain(const TrainConfig& t, bool resume = false) {
  validate_train_config(t);
  if (t.data.empty()) throw UsageError("run_pretrain: no data directory configured");
  if (t.out.empty()) throw UsageError("run_pretrain: no output directory configured");
  const ModelConfig& c = t.model;

  CorpusSpec corpus = read_corpus_meta(t.data);
  if (corpus.T != c.frames || corpus.H != c.image_size || corpus.W != c.image_size)
    throw UsageError("run_pretrain: corpus clips are " + std::to_string(corpus.T) + "x" +
                     std::to_string(corpus.H) + "x" + std::to_string(corpus.W) +
                     ", model wants " + std::to_string(c.frames) + "x" +
                     std::to_string(c.image_size) + "x" + std::to_string(c.image_size));
  CorpusSpec sampling = corpus;
  if (t.stride > 0) sampling.stride = t.stride;

  auto label_rows = read_labels(t.data, "train");
  int64_t clips = int64_t(label_rows.size());
  if (clips < 1) throw UsageError("run_pretrain: empty train split");
  std::vector<int64_t> labels(size_t(clips), 0);
  for (auto& [idx, cls] : label_rows) {
    if (idx < 0 || idx >= clips) throw FormatError("labels.csv: index " + std::to_string(idx));
    labels[size_t(idx)] = cls;
  }

  auto tok = tokenizer_by_name(t.tokenizer);
  if (c.motion == MotionKind::flow && t.fresh_clips)
    throw UsageError("run_pretrain: flow targets are precomputed files; set fresh_clips = false");

  // stored clips are reused every epoch unless fresh_clips resamples them
  std::vector<VideoClip> stored;
  if (!t.fresh_clips)
    for (int64_t i = 0; i < clips; ++i)
      stored.push_back(load_clip(t.data, "train", i, labels[size_t(i)], corpus.stride));

  Rng init_rng(derive_seed(t.seed, {0x70617261u}));
  auto model_params = init_model_params<S>(init_rng, c);
  NamedParams<S> named;
  collect_params(model_params, named);
  AdamWConfig<S> ocfg;
  ocfg.beta1 = S(t.beta1);
  ocfg.beta2 = S(t.beta2);
  ocfg.weight_decay = S(t.weight_decay);
  AdamW<S> opt(named, ocfg);

  const int64_t spe = steps_per_epoch(clips, t.batch_size);
  const int64_t total_steps = t.total_epochs * spe;
  const int64_t warmup_steps = t.warmup_epochs * spe;

  namespace fs = std::filesystem;
  fs::create_directories(t.out);
  write_train_config(t.out + "/config.txt", t);
  std::string csv_path = t.out + "/metrics.csv";

  int64_t start = 0;
  if (resume) {
    auto ckpts = list_checkpoints(t.out);
    if (!ckpts.empty()) start = load_checkpoint(ckpts.back().second, named, &opt);
  }
  if (start > 0) {
    // drop CSV rows past the checkpoint; they came from steps being redone
    std::ifstream old(csv_path);
    std::vector<std::string> keep;
    std::string line;
    while (old && std::getline(old, line) && int64_t(keep.size()) < start + 1)
      keep.push_back(line);
    std::ofstream rewrite(csv_path, std::ios::trunc);
    for (const auto& l : keep) rewrite << l << '\n';
  }
  std::ofstream csv(csv_path, start > 0 ? std::ios::app : std::ios::trunc);
  if (!csv) throw FormatError("cannot write " + csv_path);
  if (start == 0) csv << "step,lr,L_app,L_mot,L_align,L_total\n";

  Rng stream(derive_seed(t.seed, {0x73616d70u}));
  for (int64_t skip = 0; skip < start * t.batch_size; ++skip) {
    stream.raw();
    stream.raw();
  }

  RunReport report;
  report.metrics_csv = csv_path;
  std::vector<double> totals;
  for (int64_t s = start; s < total_steps; ++s) {
    std::vector<VideoClip> batch;
    std::vector<std::array<uint64_t, 2>> seeds;
    std::vector<std::string> flow_files;
    for (int64_t k = 0; k < t.batch_size; ++k) {
      int64_t g = s * t.batch_size + k;
      int64_t idx = g % clips;
      int64_t epoch = g / clips;
      if (t.fresh_clips)
        batch.push_back(corpus_clip(sampling, "train", idx, labels[size_t(idx)], epoch));
      else
        batch.push_back(stored[size_t(idx)]);
      if (c.motion == MotionKind::flow) flow_files.push_back(flow_path(t.data, "train", idx));
      uint64_t mask_seed = stream.raw();
      uint64_t order_seed = stream.raw();
      seeds.push_back({mask_seed, order_seed});
    }

    double lr = lr_at(s, total_steps, warmup_steps, t.base_lr, t.batch_size);
    auto fw = forward_pretrain(t, model_params, batch, seeds, *tok,
                               c.motion == MotionKind::flow ? &flow_files : nullptr);
    opt.zero_grad();
    backward(fw.bundle.total);
    opt.step(S(lr));

    double total = double(fw.bundle.total.item());
    totals.push_back(total);
    csv << (s + 1) << ',' << detail::csv_num(lr) << ','
        << detail::csv_num(double(fw.bundle.appearance.item())) << ','
        << detail::csv_num(double(fw.bundle.motion.item())) << ','
        << detail::csv_num(double(fw.bundle.alignment.item())) << ','
        << detail::csv_num(total) << '\n';
    csv.flush();

    if ((s + 1) % t.checkpoint_every == 0 || s + 1 == total_steps) {
      std::string dir = t.out + "/ckpt_" + std::to_string(s + 1);
      save_checkpoint(dir, named, opt, s + 1);
      prune_checkpoints(t.out);
      report.last_checkpoint = dir;
    }
  }
  if (report.last_checkpoint.empty()) {
    auto ckpts = list_checkpoints(t.out);
    if (!ckpts.empty()) report.last_checkpoint = ckpts.back().second;
  }

  report.steps = total_steps;
  auto window_mean = [&totals](size_t from, size_t count) {
    double sum = 0.0;
    for (size_t i = from; i < from + count; ++i) sum += totals[i];
    return sum / double(count);
  };
  if (!totals.empty()) {
    size_t w = std::min<size_t>(10, totals.size());
    report.first10_total = window_mean(0, w);
    report.last10_total = window_mean(totals.size() - w, w);
  }
  return report;
}

// ---- linear probe on frozen features ----

struct ProbeReport {
  double train_acc = 0.0, val_acc = 0.0;
  double baseline_train_acc = 0.0, baseline_val_acc = 0.0;
  int64_t classes = 0;
};

struct ProbeOptions {
  int64_t steps = 400;
  int64_t batch = 16;
  double lr = 0.01;
  uint64_t seed = 7;
};

namespace detail {

// frozen-encoder feature rows per stored clip of a split
template <class S>
std::pair<Tensor<S>, std::vector<int64_t>> split_features(const TrainConfig& t,
                                                          const ModelParams<S>& frozen,
                                                          const std::string& split) {
  auto rows = read_labels(t.data, split);
  if (rows.empty()) throw UsageError("linear_probe: empty split " + split);
  CorpusSpec corpus = read_corpus_meta(t.data);
  int64_t fd = clip_feature_dim(t.model);
  Tensor<S> X({int64_t(rows.size()), fd});
  std::vector<int64_t> y;
  for (size_t i = 0; i < rows.size(); ++i) {
    VideoClip clip = load_clip(t.data, split, rows[i].first, rows[i].second, corpus.stride);
    auto grid = patchify(frames_as<S>(clip), t.model.patch_size);
    auto f = clip_feature(t.model, frozen, grid);
    std::copy(f.values().begin(), f.values().end(), X.values().begin() + int64_t(i) * fd);
    y.push_back(rows[i].second);
  }
  return {X, y};
}

// z-scores every feature dimension with the training split's statistics, so
// small content directions are not drowned by large shared components
template <class S>
void standardize_features(Tensor<S>& Xtr, Tensor<S>& Xva) {
  int64_t n = Xtr.dim(0), D = Xtr.dim(1);
  for (int64_t j = 0; j < D; ++j) {
    double mean = 0.0;
    for (int64_t i = 0; i < n; ++i) mean += double(Xtr.values()[size_t(i * D + j)]);
    mean /= double(n);
    double var = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      double d = double(Xtr.values()[size_t(i * D + j)]) - mean;
      var += d * d;
    }
    double inv = 1.0 / (std::sqrt(var / double(n)) + 1e-8);
    for (int64_t i = 0; i < n; ++i) {
      auto& v = Xtr.values()[size_t(i * D + j)];
      v = S((double(v) - mean) * inv);
    }
    for (int64_t i = 0; i < Xva.dim(0); ++i) {
      auto& v = Xva.values()[size_t(i * D + j)];
      v = S((double(v) - mean) * inv);
    }
  }
}

template <class S>
double readout_accuracy(const Tensor<S>& X, const std::vector<int64_t>& y, const Tensor<S>& w,
                        const Tensor<S>& b) {
  int64_t n = X.dim(0), D = X.dim(1), K = w.dim(1);
  const S* xv = X.values().data();
  const S* wv = w.values().data();
  const S* bv = b.values().data();
  int64_t hits = 0;
  for (int64_t i = 0; i < n; ++i) {
    int64_t best = 0;
    S best_score = 0;
    for (int64_t k = 0; k < K; ++k) {
      S score = bv[k];
      for (int64_t d = 0; d < D; ++d) score += xv[i * D + d] * wv[d * K + k];
      if (k == 0 || score > best_score) {
        best_score = score;
        best = k;
      }
    }
    if (best == y[size_t(i)]) ++hits;
  }
  return double(hits) / double(n);
}

// trains a linear readout on frozen features with AdamW at a constant lr
template <class S>
std::pair<double, double> fit_readout(const Tensor<S>& Xtr, const std::vector<int64_t>& ytr,
                                      const Tensor<S>& Xva, const std::vector<int64_t>& yva,
                                      int64_t classes, const ProbeOptions& po) {
  Rng rng(derive_seed(po.seed, {0x70726f62u}));
  auto w = normal_param<S>(rng, {Xtr.dim(1), classes});
  auto b = const_param<S>({classes}, S(0));
  AdamWConfig<S> ocfg;
  ocfg.weight_decay = S(0);
  AdamW<S> opt({{"w", w}, {"b", b}}, ocfg);
  int64_t n = Xtr.dim(0), D = Xtr.dim(1);
  for (int64_t s = 0; s < po.steps; ++s) {
    int64_t bs = std::min(po.batch, n);
    Tensor<S> xb({bs, D});
    std::vector<int64_t> yb;
    for (int64_t k = 0; k < bs; ++k) {
      int64_t idx = (s * bs + k) % n;
      std::copy(Xtr.values().begin() + idx * D, Xtr.values().begin() + (idx + 1) * D,
                xb.values().begin() + k * D);
      yb.push_back(ytr[size_t(idx)]);
    }
    opt.zero_grad();
    backward(cross_entropy_mean(linear(xb, w, b), yb));
    opt.step(S(po.lr));
  }
  return {readout_accuracy(Xtr, ytr, w, b), readout_accuracy(Xva, yva, w, b)};
}

}  // namespace detail

// Freezes the encoder, mean-pools full-grid latents per stored clip, and
// fits a linear classifier; reports the same probe on a random-init
// encoder as the baseline.
template <class S = float>
ProbeReport linear_probe(const TrainConfig& t, const ModelParams<S>& trained,
                         const ProbeOptions& po = {}) {
  validate_config(t.model);
  if (t.data.empty()) throw UsageError("linear_probe: no data directory configured");
  CorpusSpec corpus = read_corpus_meta(t.data);
  ProbeReport rep;
  rep.classes = corpus.classes;

  auto run = [&](const ModelParams<S>& params) {
    auto frozen = detached_params(params);
    auto [Xtr, ytr] = detail::split_features(t, frozen, "train");
    auto [Xva, yva] = detail::split_features(t, frozen, "val");
    detail::standardize_features(Xtr, Xva);
    for (int64_t cls : ytr)
      if (cls < 0 || cls >= corpus.classes)
        throw UsageError("linear_probe: label " + std::to_string(cls) + " outside " +
                         std::to_string(corpus.classes) + " classes");
    for (int64_t cls : yva)
      if (cls < 0 || cls >= corpus.classes)
        throw UsageError("linear_probe: label " + std::to_string(cls) + " outside " +
                         std::to_string(corpus.classes) + " classes");
    return detail::fit_readout(Xtr, ytr, Xva, yva, corpus.classes, po);
  };

  std::tie(rep.train_acc, rep.val_acc) = run(trained);
  Rng base_rng(derive_seed(po.seed, {0x62617365u}));
  auto baseline = init_model_params<S>(base_rng, t.model);
  std::tie(rep.baseline_train_acc, rep.baseline_val_acc) = run(baseline);
  return rep;
}

// rebuilds the model recorded next to a checkpoint and probes it
template <class S = float>
ProbeReport probe_checkpoint(const std::string& ckpt_dir, const std::string& data_override = "",
                             const ProbeOptions& po = {}) {
  TrainConfig t = load_train_config(ckpt_dir + "/../config.txt");
  if (!data_override.empty()) t.data = data_override;
  Rng rng(derive_seed(t.seed, {0x70617261u}));
  auto params = init_model_params<S>(rng, t.model);
  NamedParams<S> named;
  collect_params(params, named);
  load_checkpoint<S>(ckpt_dir, named);
  return linear_probe(t, params, po);
}

// ---- query-content leakage probe ----

struct LeakageReport {
  double with_pos_acc = 0.0;     // readout on position-stamped queries
  double without_pos_acc = 0.0;  // same task with the position tables zeroed
  int64_t steps_to_95 = -1;      // first step whose eval accuracy exceeds 0.95
};

namespace detail {

// mean query per frame slot after shuffling the temporal halves: what the
// clip-order head would see before any decoding, with no video content
template <class S>
std::vector<S> query_feature(const ModelConfig& c, const ModelParams<S>& p, uint64_t mask_seed,
                             const std::vector<int64_t>& half_order) {
  MaskSpec mask = tube_mask(c.sites(), c.frames, 0.75, mask_seed);
  auto q = mask_queries(p.mask_query, p.pos_dec.temporal, p.pos_dec.spatial, mask.positions());
  int64_t m = mask.masked_per_frame(), D = c.rw();
  auto perm = frame_permutation(half_order, c.frames);
  std::vector<S> feat(size_t(c.frames * D), S(0));
  const S* qv = q.values().data();
  for (int64_t slot = 0; slot < c.frames; ++slot) {
    int64_t src = perm[size_t(slot)];
    for (int64_t j = 0; j < m; ++j)
      for (int64_t d = 0; d < D; ++d)
        feat[size_t(slot * D + d)] += qv[(src * m + j) * D + d] / S(m);
  }
  return feat;
}

}  // namespace detail

// Trains a linear readout to name the half order from shuffled query
// stacks alone. With positional embeddings in the queries the two orders
// are separable; with the tables zeroed the inputs are identical for both
// labels and accuracy stays at chance.
template <class S = float>
LeakageReport leakage_probe(const ModelConfig& c, uint64_t seed, int64_t steps = 200,
                            int64_t batch = 16) {
  validate_config(c);
  if (c.frames % 2 != 0) throw UsageError("leakage_probe: frame count must be even");
  Rng init_rng(derive_seed(seed, {0x6c65616bu}));
  auto params = init_model_params<S>(init_rng, c);
  // same weights in fresh storage, with the position tables zeroed out
  Rng init_rng2(derive_seed(seed, {0x6c65616bu}));
  auto no_pos = init_model_params<S>(init_rng2, c);
  std::fill(no_pos.pos_dec.temporal.values().begin(), no_pos.pos_dec.temporal.values().end(),
            S(0));
  std::fill(no_pos.pos_dec.spatial.values().begin(), no_pos.pos_dec.spatial.values().end(),
            S(0));

  const int64_t D = c.frames * c.rw();
  const int64_t eval_n = 64;

  auto sample = [&](const ModelParams<S>& p, uint64_t s, std::vector<S>& x, int64_t& label) {
    Rng rng(derive_seed(seed, {0x64726177u, s}));
    uint64_t mask_seed = rng.raw();
    auto half = draw_half_order(rng);
    label = clip_order_label(half);
    x = detail::query_feature(c, p, mask_seed, half);
  };

  LeakageReport rep;
  auto run = [&](const ModelParams<S>& p, double& final_acc, int64_t* first_hit) {
    Rng rng(derive_seed(seed, {0x726561646fu}));
    auto w = normal_param<S>(rng, {D, 2});
    auto b = const_param<S>({2}, S(0));
    AdamWConfig<S> ocfg;
    ocfg.weight_decay = S(0);
    AdamW<S> opt({{"w", w}, {"b", b}}, ocfg);

    Tensor<S> Xe({eval_n, D});
    auto ye = std::vector<int64_t>(size_t(eval_n));
    for (int64_t i = 0; i < eval_n; ++i) {
      std::vector<S> x;
      sample(p, uint64_t(1'000'000 + i), x, ye[size_t(i)]);
      std::copy(x.begin(), x.end(), Xe.values().begin() + i * D);
    }

    for (int64_t s = 0; s < steps; ++s) {
      Tensor<S> xb({batch, D});
      auto yb = std::vector<int64_t>(size_t(batch));
      for (int64_t k = 0; k < batch; ++k) {
        std::vector<S> x;
        sample(p, uint64_t(s * batch + k), x, yb[size_t(k)]);
        std::copy(x.begin(), x.end(), xb.values().begin() + k * D);
      }
      opt.zero_grad();
      backward(cross_entropy_mean(linear(xb, w, b), yb));
      opt.step(S(0.05));
      final_acc = detail::readout_accuracy(Xe, ye, w, b);
      if (first_hit != nullptr && *first_hit < 0 && final_acc > 0.95) *first_hit = s + 1;
    }
  };

  run(params, rep.with_pos_acc, &rep.steps_to_95);
  run(no_pos, rep.without_pos_acc, nullptr);
  return rep;
}

// ---- ablation harness ----

struct AblationCell {
  std::string name;
  std::vector<std::pair<std::string, std::string>> overrides;
};

// grid file: one cell per line, `name key=value key=value ...`
inline std::vector<AblationCell> parse_grid(std::istream& is) {
  std::vector<AblationCell> cells;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream ls(line);
    AblationCell cell;
    if (!(ls >> cell.name)) continue;
    std::string item;
    while (ls >> item) {
      auto eq = item.find('=');
      if (eq == std::string::npos)
        throw UsageError("grid line " + std::to_string(lineno) + ": expected key=value, got '" +
                         item + "'");
      cell.overrides.emplace_back(item.substr(0, eq), item.substr(eq + 1));
    }
    cells.push_back(std::move(cell));
  }
  if (cells.empty()) throw UsageError("grid holds no cells");
  return cells;
}

// one pre-train + probe per cell; rows mirror the grid order
template <class S = float>
std::string ablate(const TrainConfig& base, const std::vector<AblationCell>& cells,
                   const std::string& out_csv) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(out_csv).parent_path());
  std::ofstream csv(out_csv);
  if (!csv) throw FormatError("cannot write " + out_csv);
  csv << "run,config,final_total,probe_train,probe_val,baseline_val\n";
  for (const auto& cell : cells) {
    TrainConfig t = base;
    std::string desc;
    for (const auto& [k, v] : cell.overrides) {
      apply_setting(t, k, v);
      if (!desc.empty()) desc += ' ';
      desc += k + "=" + v;
    }
    t.out = base.out + "/" + cell.name;
    RunReport run = run_pretrain<S>(t, false);
    ProbeReport probe = probe_checkpoint<S>(run.last_checkpoint, t.data);
    csv << cell.name << ',' << (desc.empty() ? "-" : desc) << ','
        << detail::csv_num(run.last10_total) << ',' << detail::csv_num(probe.train_acc) << ','
        << detail::csv_num(probe.val_acc) << ',' << detail::csv_num(probe.baseline_val_acc)
        << '\n';
    csv.flush();
  }
  return out_csv;
}

}  // namespace mam2
