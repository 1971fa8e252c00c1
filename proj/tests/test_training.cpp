// Config parsing round trips, pre-training step identities, checkpoint
// round trips, loop determinism and resume, the linear probe, the
// query-leakage probe, and the ablation harness.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mam2/training.hpp"

using namespace mam2;
namespace fs = std::filesystem;

namespace {

std::string fresh_dir(const std::string& tag) {
  std::string dir = (fs::temp_directory_path() / ("mam2_train_" + tag)).string();
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// smallest grid the clip generator allows: 16x16 frames, 8-pixel patches
TrainConfig tiny_config(const std::string& data, const std::string& out) {
  TrainConfig t;
  t.model.frames = 4;
  t.model.image_size = 16;
  t.model.patch_size = 8;
  t.model.width = 8;
  t.model.heads = 2;
  t.model.mlp_ratio = 2;
  t.model.enc_depth = 1;
  t.model.reg_depth = 1;
  t.model.dec_app_depth = 1;
  t.model.dec_mot_depth = 1;
  t.model.vocab = 8;
  t.mask_ratio = 0.5;
  t.batch_size = 2;
  t.total_epochs = 2;
  t.warmup_epochs = 1;
  t.base_lr = 0.01;
  t.checkpoint_every = 2;
  t.seed = 11;
  t.data = data;
  t.out = out;
  return t;
}

CorpusSpec tiny_corpus_spec() {
  CorpusSpec spec;
  spec.seed = 5;
  spec.train_clips = 4;
  spec.val_clips = 4;
  spec.T = 4;
  spec.H = 16;
  spec.W = 16;
  spec.stride = 1;
  spec.classes = 4;
  return spec;
}

std::string read_file(const std::string& path) {
  std::ifstream is(path);
  REQUIRE(is);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

}  // namespace

TEST_CASE("config settings cover every field and reject junk") {
  TrainConfig t;
  CHECK(t.base_lr == 1.5e-4);
  CHECK(t.weight_decay == 0.05);
  CHECK(t.alpha == 2.0);
  CHECK(t.beta1 == 0.9);
  CHECK(t.beta2 == 0.95);
  CHECK(t.fresh_clips);
  CHECK(t.mask_kind == MaskKind::tube);
  CHECK(t.mask_ratio == 0.75);

  std::istringstream cfg(
      "# toy run\n"
      "frames = 4\n"
      "image_size = 16   # pixels\n"
      "patch_size = 8\n"
      "width = 8\n"
      "motion = clip-order\n"
      "mask_kind = cube\n"
      "mask_ratio = 0.4\n"
      "batch_size = 3\n"
      "fresh_clips = false\n"
      "seed = 99\n");
  TrainConfig parsed = parse_train_config(cfg);
  CHECK(parsed.model.frames == 4);
  CHECK(parsed.model.image_size == 16);
  CHECK(parsed.model.motion == MotionKind::clip_order);
  CHECK(parsed.mask_kind == MaskKind::cube);
  CHECK(parsed.mask_ratio == 0.4);
  CHECK(parsed.batch_size == 3);
  CHECK_FALSE(parsed.fresh_clips);
  CHECK(parsed.seed == 99);

  TrainConfig preset;
  apply_setting(preset, "preset", "vit-l");
  CHECK(preset.model.width == 1024);
  CHECK(preset.model.enc_depth == 24);

  TrainConfig bad;
  CHECK_THROWS_AS(apply_setting(bad, "no_such_key", "1"), UsageError);
  CHECK_THROWS_AS(apply_setting(bad, "batch_size", "zero"), UsageError);
  CHECK_THROWS_AS(apply_setting(bad, "batch_size", "0"), UsageError);
  CHECK_THROWS_AS(apply_setting(bad, "fresh_clips", "maybe"), UsageError);
  CHECK_THROWS_AS(apply_setting(bad, "motion", "hog"), UsageError);
  std::istringstream noeq("frames 4\n");
  CHECK_THROWS_AS(parse_train_config(noeq), UsageError);
}

TEST_CASE("config write and reload round trips every field") {
  std::string dir = fresh_dir("cfg");
  TrainConfig t = tiny_config("/data/x", "/out/y");
  t.model.motion = MotionKind::clip_order;
  t.model.joint_decoder = false;
  t.mask_kind = MaskKind::cube;
  t.cube_block = 1;
  t.mse_reduction = MseReduction::element_mean;
  t.alpha = 0.5;
  t.base_lr = 3.25e-4;
  t.stride = 2;
  t.fresh_clips = true;
  write_train_config(dir + "/config.txt", t);
  TrainConfig r = load_train_config(dir + "/config.txt");
  CHECK(r.model.frames == t.model.frames);
  CHECK(r.model.image_size == t.model.image_size);
  CHECK(r.model.patch_size == t.model.patch_size);
  CHECK(r.model.width == t.model.width);
  CHECK(r.model.heads == t.model.heads);
  CHECK(r.model.mlp_ratio == t.model.mlp_ratio);
  CHECK(r.model.enc_depth == t.model.enc_depth);
  CHECK(r.model.vocab == t.model.vocab);
  CHECK(r.model.motion == t.model.motion);
  CHECK(r.mask_kind == t.mask_kind);
  CHECK(r.cube_block == t.cube_block);
  CHECK(r.mse_reduction == t.mse_reduction);
  CHECK(r.alpha == t.alpha);
  CHECK(r.base_lr == t.base_lr);
  CHECK(r.batch_size == t.batch_size);
  CHECK(r.total_epochs == t.total_epochs);
  CHECK(r.warmup_epochs == t.warmup_epochs);
  CHECK(r.beta1 == t.beta1);
  CHECK(r.beta2 == t.beta2);
  CHECK(r.weight_decay == t.weight_decay);
  CHECK(r.seed == t.seed);
  CHECK(r.data == t.data);
  CHECK(r.out == t.out);
  CHECK(r.stride == t.stride);
  CHECK(r.fresh_clips == t.fresh_clips);
  CHECK(r.checkpoint_every == t.checkpoint_every);
}

TEST_CASE("train config validation") {
  TrainConfig t = tiny_config("d", "o");
  t.warmup_epochs = t.total_epochs;
  CHECK_THROWS_AS(validate_train_config(t), UsageError);

  t = tiny_config("d", "o");
  t.stride = 2;
  t.fresh_clips = false;
  CHECK_THROWS_AS(validate_train_config(t), UsageError);

  t = tiny_config("d", "o");
  t.mask_ratio = 1.5;
  CHECK_THROWS_AS(validate_train_config(t), UsageError);

  CHECK_NOTHROW(validate_train_config(tiny_config("d", "o")));
}

TEST_CASE("zeroed heads on a static clip give exact loss values") {
  TrainConfig t = tiny_config("", "");
  t.alpha = 0.0;
  auto& c = t.model;
  Rng rng(3);
  auto p = init_model_params<float>(rng, c);
  for (auto* h : {&p.head_app_w, &p.head_app_b, &p.head_mot_w, &p.head_mot_b})
    std::fill(h->values().begin(), h->values().end(), 0.0f);

  VideoClip clip = generate_moving_shapes(21, 3, c.frames, c.image_size, c.image_size);
  auto tok = tokenizer_by_name(t.tokenizer);
  auto out = forward_pretrain(t, p, {clip}, {{7u, 8u}}, *tok);

  // static clip: motion targets are zero, and the zeroed head predicts zero
  CHECK(out.bundle.motion.item() == 0.0f);
  // logits all zero: every masked position pays ln(vocab)
  CHECK(out.bundle.appearance.item() == Catch::Approx(std::log(8.0)).epsilon(1e-6));
  // alpha 0 drops alignment from the total bit-exactly
  CHECK(out.bundle.total.item() == out.bundle.appearance.item());
  CHECK(out.bundle.alignment.item() > 0.0f);
  CHECK(out.latents.size() == 1);
  CHECK(out.latents[0].rank() == 3);
}

TEST_CASE("a batch of identical clips matches the single-clip bundle") {
  TrainConfig t = tiny_config("", "");
  auto& c = t.model;
  Rng rng(4);
  auto p = init_model_params<float>(rng, c);
  VideoClip clip = generate_moving_shapes(22, 0, c.frames, c.image_size, c.image_size);
  auto tok = tokenizer_by_name(t.tokenizer);

  auto one = forward_pretrain(t, p, {clip}, {{9u, 2u}}, *tok);
  auto two = forward_pretrain(t, p, {clip, clip}, {{9u, 2u}, {9u, 2u}}, *tok);
  CHECK(two.bundle.total.item() == one.bundle.total.item());
  CHECK(two.bundle.appearance.item() == one.bundle.appearance.item());
  CHECK(two.latents[0].values() == two.latents[1].values());

  // same call twice is bit-identical
  auto again = forward_pretrain(t, p, {clip}, {{9u, 2u}}, *tok);
  CHECK(again.bundle.total.item() == one.bundle.total.item());

  // different mask seed moves the losses
  auto moved = forward_pretrain(t, p, {clip}, {{10u, 2u}}, *tok);
  CHECK(moved.bundle.total.item() != one.bundle.total.item());
}

TEST_CASE("forward_pretrain guards inputs") {
  TrainConfig t = tiny_config("", "");
  auto& c = t.model;
  Rng rng(5);
  auto p = init_model_params<float>(rng, c);
  auto tok = tokenizer_by_name(t.tokenizer);
  VideoClip clip = generate_moving_shapes(23, 1, c.frames, c.image_size, c.image_size);

  CHECK_THROWS_AS(forward_pretrain(t, p, {}, {}, *tok), UsageError);
  CHECK_THROWS_AS(forward_pretrain(t, p, {clip}, {}, *tok), UsageError);

  VideoClip wrong = generate_moving_shapes(23, 1, c.frames + 2, c.image_size, c.image_size);
  CHECK_THROWS_AS(forward_pretrain(t, p, {wrong}, {{1u, 1u}}, *tok), UsageError);

  TrainConfig tf = t;
  tf.model.motion = MotionKind::flow;
  auto pf = init_model_params<float>(rng, tf.model);
  CHECK_THROWS_AS(forward_pretrain(tf, pf, {clip}, {{1u, 1u}}, *tok), UsageError);
}

TEST_CASE("clip-order training step classifies each masked tube") {
  TrainConfig t = tiny_config("", "");
  t.model.motion = MotionKind::clip_order;
  auto& c = t.model;
  Rng rng(6);
  auto p = init_model_params<float>(rng, c);
  auto tok = tokenizer_by_name(t.tokenizer);
  VideoClip clip = generate_moving_shapes(24, 2, c.frames, c.image_size, c.image_size);

  auto out = forward_pretrain(t, p, {clip}, {{3u, 4u}}, *tok);
  CHECK(std::isfinite(double(out.bundle.motion.item())));
  CHECK(out.bundle.motion.item() > 0.0f);

  // the shuffle seed matters for the motion term only
  auto other = forward_pretrain(t, p, {clip}, {{3u, 77u}}, *tok);
  CHECK(other.bundle.appearance.item() == out.bundle.appearance.item());
  CHECK(other.bundle.alignment.item() == out.bundle.alignment.item());
}

TEST_CASE("flow corpus files feed the flow objective") {
  std::string data = fresh_dir("flow");
  CorpusSpec spec = tiny_corpus_spec();
  make_corpus(data, spec, true);

  // static class: its flow file is all zeros
  auto rows = read_labels(data, "train");
  REQUIRE(rows.size() == 4);
  auto flow3 = read_tensor<float>(flow_path(data, "train", 3));
  CHECK(flow3.shape() == Shape{spec.T - 1, 2, spec.H, spec.W});
  for (float v : flow3.values()) REQUIRE(v == 0.0f);

  // right-drift class: u is 1 on the rectangle, v stays 0
  auto flow0 = read_tensor<float>(flow_path(data, "train", 0));
  double usum = 0, vsum = 0;
  int64_t HW = spec.H * spec.W;
  for (int64_t t = 0; t + 1 < spec.T; ++t)
    for (int64_t i = 0; i < HW; ++i) {
      usum += flow0.values()[size_t((t * 2 + 0) * HW + i)];
      vsum += std::abs(flow0.values()[size_t((t * 2 + 1) * HW + i)]);
    }
  CHECK(usum > 0);
  CHECK(vsum == 0);

  TrainConfig t = tiny_config(data, "");
  t.model.motion = MotionKind::flow;
  Rng rng(7);
  auto p = init_model_params<float>(rng, t.model);
  auto tok = tokenizer_by_name(t.tokenizer);
  VideoClip clip = load_clip(data, "train", 0, 0, spec.stride);
  std::vector<std::string> files = {flow_path(data, "train", 0)};
  auto out = forward_pretrain(t, p, {clip}, {{5u, 6u}}, *tok, &files);
  CHECK(std::isfinite(double(out.bundle.total.item())));
  CHECK(out.bundle.motion.item() > 0.0f);
}

TEST_CASE("pretrain loop writes metrics and checkpoints deterministically") {
  std::string data = fresh_dir("loop_data");
  make_corpus(data, tiny_corpus_spec());

  std::string out_a = fresh_dir("loop_a");
  TrainConfig t = tiny_config(data, out_a);
  RunReport rep = run_pretrain(t);
  CHECK(rep.steps == 4);  // 4 clips / batch 2 = 2 steps per epoch, 2 epochs
  CHECK(fs::exists(out_a + "/metrics.csv"));
  CHECK(fs::exists(out_a + "/config.txt"));
  CHECK(rep.last_checkpoint == out_a + "/ckpt_4");
  CHECK(fs::exists(out_a + "/ckpt_2"));
  CHECK(fs::exists(out_a + "/ckpt_4"));

  std::string csv = read_file(out_a + "/metrics.csv");
  CHECK(csv.rfind("step,lr,L_app,L_mot,L_align,L_total\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
  // warmup: the first step runs at lr 0
  CHECK(csv.find("\n1,0,") != std::string::npos);

  std::string out_b = fresh_dir("loop_b");
  TrainConfig tb = t;
  tb.out = out_b;
  run_pretrain(tb);
  CHECK(read_file(out_b + "/metrics.csv") == csv);

  // a different seed changes the metrics
  std::string out_c = fresh_dir("loop_c");
  TrainConfig tc = t;
  tc.out = out_c;
  tc.seed = 12;
  run_pretrain(tc);
  CHECK(read_file(out_c + "/metrics.csv") != csv);
}

TEST_CASE("checkpoint state round trips bit-exactly") {
  TrainConfig t = tiny_config("", "");
  Rng rng(8);
  auto p = init_model_params<float>(rng, t.model);
  NamedParams<float> named;
  collect_params(p, named);
  AdamW<float> opt(named);
  // one step with synthetic gradients so the moments are nonzero
  opt.zero_grad();
  backward(sum_all(mul(named[0].second, named[0].second)));
  opt.step(0.01f);

  std::string dir = fresh_dir("ckpt") + "/ckpt_1";
  save_checkpoint(dir, named, opt, 1);

  Rng rng2(99);
  auto q = init_model_params<float>(rng2, t.model);
  NamedParams<float> named2;
  collect_params(q, named2);
  AdamW<float> opt2(named2);
  CHECK(load_checkpoint(dir, named2, &opt2) == 1);
  for (size_t i = 0; i < named.size(); ++i)
    REQUIRE(named2[i].second.values() == named[i].second.values());
  CHECK(opt2.moments1() == opt.moments1());
  CHECK(opt2.moments2() == opt.moments2());
  CHECK(opt2.steps_done() == 1);

  // a different architecture refuses the manifest
  TrainConfig small = t;
  small.model.enc_depth = 2;
  Rng rng3(1);
  auto r = init_model_params<float>(rng3, small.model);
  NamedParams<float> named3;
  collect_params(r, named3);
  CHECK_THROWS_AS(load_checkpoint(dir, named3), FormatError);
}

TEST_CASE("resuming from a checkpoint reproduces the uninterrupted run") {
  std::string data = fresh_dir("resume_data");
  make_corpus(data, tiny_corpus_spec());

  std::string out_full = fresh_dir("resume_full");
  TrainConfig t = tiny_config(data, out_full);
  run_pretrain(t);
  std::string full_csv = read_file(out_full + "/metrics.csv");

  // reconstruct an interrupted copy: the step-2 checkpoint and the first
  // two metric rows, then resume to the end
  std::string out_part = fresh_dir("resume_part");
  TrainConfig tp = t;
  tp.out = out_part;
  fs::create_directories(out_part);
  fs::copy(out_full + "/ckpt_2", out_part + "/ckpt_2", fs::copy_options::recursive);
  {
    std::istringstream full(full_csv);
    std::ofstream partial(out_part + "/metrics.csv");
    std::string line;
    for (int i = 0; i < 3 && std::getline(full, line); ++i) partial << line << '\n';
  }
  run_pretrain(tp, true);
  CHECK(read_file(out_part + "/metrics.csv") == full_csv);
}

TEST_CASE("numeric blowup halts with the last good checkpoint retained") {
  std::string data = fresh_dir("blowup_data");
  make_corpus(data, tiny_corpus_spec());
  std::string out = fresh_dir("blowup_out");
  TrainConfig t = tiny_config(data, out);
  t.base_lr = 1e12;
  t.warmup_epochs = 0;
  t.checkpoint_every = 1;
  CHECK_THROWS_AS(run_pretrain(t), NumericError);
  CHECK_FALSE(list_checkpoints(out).empty());
}

TEST_CASE("linear probe beats nothing in particular but stays in range") {
  std::string data = fresh_dir("probe_data");
  make_corpus(data, tiny_corpus_spec());
  TrainConfig t = tiny_config(data, "");
  Rng rng(9);
  auto p = init_model_params<float>(rng, t.model);
  ProbeOptions po;
  po.steps = 40;
  ProbeReport rep = linear_probe(t, p, po);
  CHECK(rep.classes == 4);
  for (double acc : {rep.train_acc, rep.val_acc, rep.baseline_train_acc, rep.baseline_val_acc}) {
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);
  }
  ProbeReport again = linear_probe(t, p, po);
  CHECK(again.train_acc == rep.train_acc);
  CHECK(again.val_acc == rep.val_acc);

  // labels outside the class count are refused
  {
    std::ofstream labels(data + "/clips/val/labels.csv");
    labels << "index,class_id\n0,7\n1,1\n2,2\n3,3\n";
  }
  CHECK_THROWS_AS(linear_probe(t, p, po), UsageError);
}

TEST_CASE("probe_checkpoint rebuilds the recorded model") {
  std::string data = fresh_dir("probeck_data");
  make_corpus(data, tiny_corpus_spec());
  std::string out = fresh_dir("probeck_out");
  TrainConfig t = tiny_config(data, out);
  RunReport rep = run_pretrain(t);
  ProbeOptions po;
  po.steps = 40;
  ProbeReport probe = probe_checkpoint(rep.last_checkpoint, "", po);
  CHECK(probe.classes == 4);
  CHECK(probe.train_acc >= 0.0);
  CHECK(probe.train_acc <= 1.0);
}

TEST_CASE("position-stamped queries leak the clip order") {
  TrainConfig t = tiny_config("", "");
  LeakageReport rep = leakage_probe(t.model, 31, 120, 16);
  WARN("leakage probe: with positions " << rep.with_pos_acc << " (step " << rep.steps_to_95
                                        << "), without " << rep.without_pos_acc);
  CHECK(rep.with_pos_acc > 0.95);
  CHECK(rep.steps_to_95 > 0);
  CHECK(rep.steps_to_95 <= 120);
  // identical inputs for both labels: the readout cannot beat chance by much
  CHECK(rep.without_pos_acc < 0.8);

  TrainConfig odd = t;
  odd.model.frames = 3;
  CHECK_THROWS_AS(leakage_probe(odd.model, 31, 10, 4), UsageError);
}

TEST_CASE("ablation grid runs one row per cell") {
  std::string data = fresh_dir("ablate_data");
  make_corpus(data, tiny_corpus_spec());
  std::string out = fresh_dir("ablate_out");
  TrainConfig base = tiny_config(data, out);
  base.total_epochs = 1;
  base.warmup_epochs = 0;

  std::istringstream grid(
      "# two mask ratios\n"
      "rho50 mask_ratio=0.5\n"
      "rho75 mask_ratio=0.75\n");
  auto cells = parse_grid(grid);
  REQUIRE(cells.size() == 2);
  CHECK(cells[0].name == "rho50");
  CHECK(cells[1].overrides[0].first == "mask_ratio");

  std::string csv_path = ablate(base, cells, out + "/ablation.csv");
  std::string csv = read_file(csv_path);
  CHECK(csv.rfind("run,config,final_total,probe_train,probe_val,baseline_val\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
  CHECK(csv.find("rho50,mask_ratio=0.5,") != std::string::npos);

  std::istringstream empty("# nothing\n");
  CHECK_THROWS_AS(parse_grid(empty), UsageError);
  std::istringstream junk("cell mask_ratio:0.5\n");
  CHECK_THROWS_AS(parse_grid(junk), UsageError);
}
