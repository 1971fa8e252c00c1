// Command-line front end: corpus generation, pre-training, probing,
// ablation sweeps, mask rendering, and the gradient-check suite.

#include <algorithm>
#include <fstream>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "mam2/checks.hpp"
#include "mam2/gradcheck.hpp"
#include "mam2/training.hpp"

namespace {

int usage() {
  std::cerr
      << "usage: mam2 <command> [options]\n"
      << "commands:\n"
      << "  pretrain --config <file> [--resume] [--<key> <value> ...]\n"
      << "      run the pre-training loop; any config key works as a flag\n"
      << "  probe --ckpt <dir> [--data <dir>] [--steps N] [--batch N] [--lr X] [--seed N]\n"
      << "      linear probe on a checkpoint, against a random-init baseline\n"
      << "  ablate --grid <file> [--config <file>] [--<key> <value> ...]\n"
      << "      one pretrain+probe per grid line: `name key=value ...`\n"
      << "  make-corpus --out <dir> [--seed N] [--train N] [--val N] [--frames N]\n"
      << "      [--size N] [--stride N] [--classes N] [--flow]\n"
      << "      write a synthetic moving-shapes corpus (optionally with flow files)\n"
      << "  dump-mask --out <file.ppm> [--kind tube|cube] [--ratio R] [--grid N]\n"
      << "      [--frames N] [--block N] [--seed N] [--cell PX]\n"
      << "      render a sampled mask, masked cells red\n"
      << "  gradcheck [--ops-only]\n"
      << "      finite-difference checks per op, then end to end at toy size\n";
  return 2;
}

struct Args {
  std::vector<std::pair<std::string, std::string>> kv;  // in command-line order
  bool resume = false, flow = false, ops_only = false;

  const std::string* find(const std::string& key) const {
    for (auto& [k, v] : kv)
      if (k == key) return &v;
    return nullptr;
  }
  std::string get(const std::string& key, const std::string& fallback) const {
    const std::string* v = find(key);
    return v != nullptr ? *v : fallback;
  }
  int64_t get_i64(const std::string& key, int64_t fallback) const {
    const std::string* v = find(key);
    if (v == nullptr) return fallback;
    try {
      return std::stoll(*v);
    } catch (const std::exception&) {
      throw mam2::UsageError("--" + key + " wants an integer, got '" + *v + "'");
    }
  }
  double get_f64(const std::string& key, double fallback) const {
    const std::string* v = find(key);
    if (v == nullptr) return fallback;
    try {
      return std::stod(*v);
    } catch (const std::exception&) {
      throw mam2::UsageError("--" + key + " wants a number, got '" + *v + "'");
    }
  }
};

Args parse_args(int argc, char** argv, int from) {
  Args a;
  for (int i = from; i < argc; ++i) {
    std::string arg = argv[i];
    if (arg.rfind("--", 0) != 0)
      throw mam2::UsageError("expected --option, got '" + arg + "'");
    std::string key = arg.substr(2);
    if (key == "resume") a.resume = true;
    else if (key == "flow") a.flow = true;
    else if (key == "ops-only") a.ops_only = true;
    else {
      if (i + 1 >= argc) throw mam2::UsageError("--" + key + " wants a value");
      a.kv.emplace_back(key, argv[++i]);
    }
  }
  return a;
}

mam2::TrainConfig config_from(const Args& a) {
  mam2::TrainConfig t;
  const std::string* file = a.find("config");
  if (file != nullptr) t = mam2::load_train_config(*file, std::move(t));
  for (auto& [k, v] : a.kv)
    if (k != "config") mam2::apply_setting(t, k, v);
  return t;
}

int cmd_pretrain(const Args& a) {
  mam2::TrainConfig t = config_from(a);
  mam2::RunReport rep = mam2::run_pretrain(t, a.resume);
  std::cout << "steps: " << rep.steps << "\n"
            << "metrics: " << rep.metrics_csv << "\n"
            << "checkpoint: " << rep.last_checkpoint << "\n"
            << "mean total, steps 1-10:  " << rep.first10_total << "\n"
            << "mean total, final 10:    " << rep.last10_total << "\n";
  return 0;
}

int cmd_probe(const Args& a) {
  const std::string* ckpt = a.find("ckpt");
  if (ckpt == nullptr) throw mam2::UsageError("probe wants --ckpt <dir>");
  mam2::ProbeOptions po;
  po.steps = a.get_i64("steps", po.steps);
  po.batch = a.get_i64("batch", po.batch);
  po.lr = a.get_f64("lr", po.lr);
  po.seed = uint64_t(a.get_i64("seed", int64_t(po.seed)));
  mam2::ProbeReport rep = mam2::probe_checkpoint(*ckpt, a.get("data", ""), po);
  std::cout << "classes: " << rep.classes << "\n"
            << "probe train acc:    " << rep.train_acc << "\n"
            << "probe val acc:      " << rep.val_acc << "\n"
            << "baseline train acc: " << rep.baseline_train_acc << "\n"
            << "baseline val acc:   " << rep.baseline_val_acc << "\n";
  return 0;
}

int cmd_ablate(const Args& a) {
  const std::string* grid_file = a.find("grid");
  if (grid_file == nullptr) throw mam2::UsageError("ablate wants --grid <file>");
  std::ifstream is(*grid_file);
  if (!is) throw mam2::FormatError("cannot open grid " + *grid_file);
  auto cells = mam2::parse_grid(is);
  Args base_args = a;
  base_args.kv.erase(std::remove_if(base_args.kv.begin(), base_args.kv.end(),
                                    [](auto& p) { return p.first == "grid"; }),
                     base_args.kv.end());
  mam2::TrainConfig base = config_from(base_args);
  if (base.out.empty()) throw mam2::UsageError("ablate wants an out directory (out = ...)");
  std::string csv = mam2::ablate(base, cells, base.out + "/ablation.csv");
  std::cout << "wrote " << csv << " (" << cells.size() << " cells)\n";
  return 0;
}

int cmd_make_corpus(const Args& a) {
  const std::string* out = a.find("out");
  if (out == nullptr) throw mam2::UsageError("make-corpus wants --out <dir>");
  mam2::CorpusSpec spec;
  spec.seed = uint64_t(a.get_i64("seed", int64_t(spec.seed)));
  spec.train_clips = a.get_i64("train", spec.train_clips);
  spec.val_clips = a.get_i64("val", spec.val_clips);
  spec.T = a.get_i64("frames", spec.T);
  spec.H = spec.W = a.get_i64("size", spec.H);
  spec.stride = a.get_i64("stride", spec.stride);
  spec.classes = a.get_i64("classes", spec.classes);
  mam2::make_corpus(*out, spec, a.flow);
  std::cout << "wrote " << spec.train_clips << " train + " << spec.val_clips
            << " val clips under " << *out << (a.flow ? " with flow files" : "") << "\n";
  return 0;
}

int cmd_dump_mask(const Args& a) {
  const std::string* out = a.find("out");
  if (out == nullptr) throw mam2::UsageError("dump-mask wants --out <file.ppm>");
  std::string kind = a.get("kind", "tube");
  int64_t side = a.get_i64("grid", 14);
  int64_t frames = a.get_i64("frames", 16);
  double ratio = a.get_f64("ratio", 0.75);
  uint64_t seed = uint64_t(a.get_i64("seed", 1));
  mam2::MaskSpec mask =
      mam2::mask_kind_from(kind) == mam2::MaskKind::tube
          ? mam2::tube_mask(side * side, frames, ratio, seed)
          : mam2::cube_mask(side, side, frames, ratio, a.get_i64("block", 2), seed);
  mam2::write_mask_ppm(mask, side, side, *out, a.get_i64("cell", 16));
  std::cout << "wrote " << *out << ": " << mask.masked_per_frame() << "/" << mask.N
            << " cells masked per frame\n";
  return 0;
}

int cmd_gradcheck(const Args& a) {
  bool ok = mam2::run_op_gradchecks(&std::cout);
  if (!a.ops_only) {
    mam2::FdReport rep = mam2::e2e_toy_gradcheck();
    bool e2e_ok = rep.pass(1e-5);
    std::cout << "e2e toy objective: max rel err " << rep.max_rel << " ("
              << (e2e_ok ? "pass" : std::string("FAIL at ") + rep.worst) << ")\n";
    ok = ok && e2e_ok;
  }
  std::cout << (ok ? "all checks pass" : "FAILURES above") << "\n";
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) return usage();
  std::string cmd = argv[1];
  try {
    Args a = parse_args(argc, argv, 2);
    if (cmd == "pretrain") return cmd_pretrain(a);
    if (cmd == "probe") return cmd_probe(a);
    if (cmd == "ablate") return cmd_ablate(a);
    if (cmd == "make-corpus") return cmd_make_corpus(a);
    if (cmd == "dump-mask") return cmd_dump_mask(a);
    if (cmd == "gradcheck") return cmd_gradcheck(a);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return usage();
}
