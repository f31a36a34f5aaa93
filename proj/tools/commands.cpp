#include "commands.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "flashsvd/encoder.hpp"
#include "flashsvd/errors.hpp"
#include "flashsvd/factorize.hpp"
#include "flashsvd/model_io.hpp"
#include "flashsvd/planner.hpp"
#include "flashsvd/verify.hpp"

namespace flashsvd::cli {

namespace {

struct Options {
  std::uint64_t seed = 42;
  std::string out_path;
  std::size_t batch = 1;
  std::size_t seqlen = 128;
  std::size_t d_model = 768;
  std::size_t d_ff = 3072;
  std::size_t heads = 12;
  std::size_t groups = 0;  // 0: per-head
  std::size_t rank = 64;
  std::size_t layers = 1;
  std::size_t proj_rank = 0;
  std::size_t ffn_rank = 0;
  TilePlan plan;
  std::string model_path;
  std::string mode_str = "flash-v1";
  std::vector<std::size_t> b_list, m_list, r_list;
  std::vector<std::string> mode_list;
  std::size_t reps = 1;
  std::string suite;
  double peak_flops = 1e12;
  double beta = 1e12;
};

RunMode mode_from_flag(const std::string& s) {
  if (s == "dense") return RunMode::Dense;
  if (s == "naive") return RunMode::NaiveLowRank;
  if (s == "flash-v1") return RunMode::FlashV1;
  if (s == "flash-v2") return RunMode::FlashV2;
  throw ConfigError("unknown mode '" + s +
                    "' (expected dense|naive|flash-v1|flash-v2)");
}

const char* flag_name(RunMode m) {
  switch (m) {
    case RunMode::Dense: return "dense";
    case RunMode::NaiveLowRank: return "naive";
    case RunMode::FlashV1: return "flash-v1";
    case RunMode::FlashV2: return "flash-v2";
  }
  return "?";
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

std::string rational_brief(const Rational& r) {
  if (r.is_integer()) return r.str();
  return r.str() + " = " + fmt("%.2f", r.value());
}

void fill_uniform(Tensor& t, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < t.numel(); ++i) {
    const double u = double(rng() >> 11) * 0x1p-53;  // [0, 1)
    t.data()[i] = float(2.0 * u - 1.0);
  }
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
  float worst = 0.0f;
  for (std::size_t i = 0; i < a.numel(); ++i)
    worst = std::max(worst, std::fabs(a.data()[i] - b.data()[i]));
  return worst;
}

double rel_fro_err(const Tensor& approx, const Tensor& exact) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < exact.numel(); ++i) {
    const double d = double(approx.data()[i]) - double(exact.data()[i]);
    num += d * d;
    den += double(exact.data()[i]) * double(exact.data()[i]);
  }
  return std::sqrt(den > 0.0 ? num / den : num);
}

std::size_t resolved_groups(const Options& o) {
  return o.groups != 0 ? o.groups : o.heads;
}

std::size_t factor_params(const FactorizedLinear& f) {
  return f.u.numel() + f.v.numel() + f.bias.numel();
}

int cmd_compress(const Options& o, std::ostream& out) {
  if (o.rank == 0) throw RankError("rank must be at least 1");
  const std::size_t groups = resolved_groups(o);

  std::vector<EncoderLayer> layers;
  if (!o.model_path.empty()) {
    layers = load_model(o.model_path);
    if (layers.empty()) throw ConfigError("model file has no layers");
    for (const EncoderLayer& layer : layers)
      if (!layer.attn_dense || !layer.ffn_dense)
        throw ConfigError("input model has no dense weights to factorize");
    const std::size_t d = layers.front().d_model();
    const std::size_t df = layers.front().d_ff();
    const std::size_t pr =
        o.proj_rank != 0 ? o.proj_rank : std::min(groups * o.rank, d);
    const std::size_t fr =
        o.ffn_rank != 0 ? o.ffn_rank : std::min(pr, std::min(d, df));
    for (EncoderLayer& layer : layers) {
      const DenseAttentionWeights& w = *layer.attn_dense;
      layer.attn_factors = factorize_attention(w.wq, w.bq, w.wk, w.bk, w.wv,
                                               w.bv, groups, o.rank);
      layer.out_proj = factorize_linear(w.wo, w.bo, pr);
      const DenseFfnWeights& f = *layer.ffn_dense;
      layer.ffn_factors =
          factorize_ffn(f.w_in, f.b_in, f.w_out, f.b_out, fr, f.activation);
    }
  } else {
    SynthSpec spec;
    spec.seed = o.seed;
    spec.layers = o.layers;
    spec.d_model = o.d_model;
    spec.d_ff = o.d_ff;
    spec.heads = o.heads;
    spec.groups = groups;
    spec.rank = o.rank;
    spec.proj_rank = o.proj_rank;
    spec.ffn_rank = o.ffn_rank;
    spec.keep_dense = true;
    layers = synth_model(spec);
  }

  const std::size_t d = layers.front().d_model();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const EncoderLayer& layer = layers[i];
    const DenseAttentionWeights& w = *layer.attn_dense;
    const DenseFfnWeights& f = *layer.ffn_dense;
    const std::size_t dense_params =
        w.wq.numel() + w.bq.numel() + w.wk.numel() + w.bk.numel() +
        w.wv.numel() + w.bv.numel() + w.wo.numel() + w.bo.numel() +
        f.w_in.numel() + f.b_in.numel() + f.w_out.numel() + f.b_out.numel();
    std::size_t low_params = factor_params(*layer.out_proj) +
                             factor_params(layer.ffn_factors->up) +
                             factor_params(layer.ffn_factors->down);
    for (const auto* m :
         {&layer.attn_factors->q, &layer.attn_factors->k,
          &layer.attn_factors->v})
      for (const FactorizedLinear& fl : *m) low_params += factor_params(fl);

    out << "layer " << i << ": params dense=" << dense_params
        << " low-rank=" << low_params << " ratio="
        << fmt("%.3f", double(low_params) / double(dense_params)) << "\n";
    out << "layer " << i << ": recon rel err q="
        << fmt("%.3e",
               rel_fro_err(reconstruct_attention(*layer.attn_factors, Qkv::Q),
                           w.wq))
        << " k="
        << fmt("%.3e",
               rel_fro_err(reconstruct_attention(*layer.attn_factors, Qkv::K),
                           w.wk))
        << " v="
        << fmt("%.3e",
               rel_fro_err(reconstruct_attention(*layer.attn_factors, Qkv::V),
                           w.wv))
        << " out=" << fmt("%.3e", rel_fro_err(reconstruct(*layer.out_proj), w.wo))
        << " ffn_in="
        << fmt("%.3e", rel_fro_err(reconstruct(layer.ffn_factors->up), f.w_in))
        << " ffn_out="
        << fmt("%.3e",
               rel_fro_err(reconstruct(layer.ffn_factors->down), f.w_out))
        << "\n";
  }

  const Rational pth = param_threshold(d, groups);
  out << "param threshold (d_model=" << d << ", groups=" << groups
      << "): r < " << rational_brief(pth) << "; rank " << o.rank
      << " compresses: "
      << (rank_below(std::int64_t(o.rank), pth) ? "yes" : "no") << "\n";

  for (EncoderLayer& layer : layers) {
    layer.attn_dense.reset();
    layer.ffn_dense.reset();
  }
  ModelInfo info = infer_model_info(layers);
  info.mode = mode_from_flag(o.mode_str);
  info.seed = o.seed;
  info.plan = o.plan;
  save_model(o.out_path, layers, info);
  out << "wrote " << o.out_path << " (" << layers.size() << " layers, rank "
      << info.rank << ")\n";
  return 0;
}

int cmd_verify(const Options& o, std::ostream& out) {
  const std::vector<std::string> names =
      o.suite.empty() ? verify_suite_names()
                      : std::vector<std::string>{o.suite};
  std::size_t total = 0, failures = 0;
  for (const std::string& name : names) {
    const SuiteReport report = run_verify_suite(name, o.seed);
    for (const CheckResult& c : report.checks) {
      ++total;
      if (c.passed) {
        out << "[PASS] " << report.suite << ": " << c.name << "\n";
      } else {
        ++failures;
        out << "[FAIL] " << report.suite << ": " << c.name << " -- "
            << c.detail << "\n";
      }
    }
  }
  out << "verify: " << total << " checks, " << failures << " failed\n";
  return failures == 0 ? 0 : 1;
}

int cmd_bench(const Options& o, std::ostream& out) {
  const std::size_t groups = resolved_groups(o);
  const std::vector<std::size_t> bs =
      o.b_list.empty() ? std::vector<std::size_t>{o.batch} : o.b_list;
  const std::vector<std::size_t> ms =
      o.m_list.empty() ? std::vector<std::size_t>{o.seqlen} : o.m_list;
  const std::vector<std::size_t> rs =
      o.r_list.empty() ? std::vector<std::size_t>{o.rank} : o.r_list;
  std::vector<RunMode> modes;
  if (o.mode_list.empty()) {
    modes = {RunMode::Dense, RunMode::NaiveLowRank, RunMode::FlashV1,
             RunMode::FlashV2};
  } else {
    for (const std::string& s : o.mode_list) modes.push_back(mode_from_flag(s));
  }
  const std::size_t reps = std::max<std::size_t>(o.reps, 1);

  std::ostringstream csv;
  csv << "b,m,h,d_model,d_ff,rank,mode,peak_transient_bytes,persistent_bytes,"
         "flops_exact,io_bytes_in,wall_ms,max_abs_err_vs_dense\n";
  std::size_t rows = 0;

  for (std::size_t r : rs) {
    SynthSpec spec;
    spec.seed = o.seed;
    spec.layers = o.layers;
    spec.d_model = o.d_model;
    spec.d_ff = o.d_ff;
    spec.heads = o.heads;
    spec.groups = groups;
    spec.rank = r;
    spec.proj_rank = r;
    spec.ffn_rank = r;
    spec.keep_dense = false;
    const std::vector<EncoderLayer> model = synth_model(spec);
    std::vector<EncoderLayer> twin;
    twin.reserve(model.size());
    for (const EncoderLayer& layer : model)
      twin.push_back(dense_equivalent(layer));

    for (std::size_t b : bs) {
      for (std::size_t m : ms) {
        Tensor x({b, m, o.d_model});
        fill_uniform(x, o.seed ^ (b * 1000003 + m * 10007 + r * 101));
        Tensor ref({b, m, o.d_model});
        {
          MemoryMeter meter;
          run_model(x, twin, RunMode::Dense, o.plan, meter, ref);
        }
        const Geometry geom{b, m, o.d_model, o.d_ff, o.heads, groups, r,
                            o.layers};
        for (RunMode mode : modes) {
          const std::vector<EncoderLayer>& chosen =
              mode == RunMode::Dense ? twin : model;
          Tensor got({b, m, o.d_model});
          std::size_t peak = 0, persistent = 0;
          std::vector<double> walls;
          walls.reserve(reps);
          for (std::size_t rep = 0; rep < reps; ++rep) {
            MemoryMeter meter;
            const auto t0 = std::chrono::steady_clock::now();
            run_model(x, chosen, mode, o.plan, meter, got);
            const auto t1 = std::chrono::steady_clock::now();
            walls.push_back(
                std::chrono::duration<double, std::milli>(t1 - t0).count());
            if (rep == 0) {
              peak = meter.peak_transient_bytes();
              persistent = meter.persistent_bytes();
            }
          }
          std::sort(walls.begin(), walls.end());
          const double wall = walls[walls.size() / 2];
          const float err = max_abs_diff(got, ref);
          csv << b << ',' << m << ',' << o.heads << ',' << o.d_model << ','
              << o.d_ff << ',' << r << ',' << flag_name(mode) << ',' << peak
              << ',' << persistent << ',' << flops_exact(geom, mode) * o.layers
              << ',' << io_bytes(geom, mode).in * o.layers << ','
              << fmt("%.3f", wall) << ',' << err << '\n';
          ++rows;
        }
      }
    }
  }

  if (o.out_path.empty()) {
    out << csv.str();
  } else {
    std::ofstream f(o.out_path);
    if (!f) throw IoError("cannot open " + o.out_path);
    f << csv.str();
    f.flush();
    if (!f) throw IoError("write failed: " + o.out_path);
    out << "wrote " << o.out_path << " (" << rows << " rows)\n";
  }
  return 0;
}

int cmd_plan(const Options& o, std::ostream& out) {
  const std::size_t groups = resolved_groups(o);
  const Geometry g{o.batch, o.seqlen, o.d_model, o.d_ff,
                   o.heads, groups,   o.rank,    o.layers};
  g.validate();
  if (!(o.peak_flops > 0.0) || !(o.beta > 0.0))
    throw ConfigError("hardware rates must be positive");
  const HardwareModel hw{o.peak_flops, o.beta};

  out << "geometry: B=" << g.batch << " M=" << g.seq_len
      << " d_model=" << g.d_model << " d_ff=" << g.d_ff << " H=" << g.heads
      << " G=" << g.groups << " r=" << g.rank << " L=" << g.layers << "\n";
  out << "param threshold grouped (G=" << groups
      << "): r < " << rational_brief(param_threshold(g.d_model, groups))
      << "\n";
  out << "param threshold single: r < "
      << rational_brief(param_threshold(g.d_model, 1)) << "\n";
  out << "memory threshold single: r < "
      << rational_brief(memory_threshold(g, ThresholdMode::SingleHead)) << "\n";
  out << "memory threshold multi: r < "
      << rational_brief(memory_threshold(g, ThresholdMode::MultiHead)) << "\n";
  out << "memory threshold grouped (G=" << groups << "): r < "
      << rational_brief(memory_threshold(g, ThresholdMode::Grouped)) << "\n";

  const Rational sp = speedup_closed_form(g);
  out << "projection speedup (closed form): " << sp.str() << " = "
      << fmt("%.3f", sp.value()) << "\n";

  const std::uint64_t fd = flops_exact(g, RunMode::Dense);
  const std::uint64_t fl = flops_exact(g, RunMode::FlashV1);
  const IoBytes iod = io_bytes(g, RunMode::Dense);
  const IoBytes iol = io_bytes(g, RunMode::FlashV1);
  out << "flops per layer: dense=" << fd << " low-rank=" << fl << "\n";
  out << "io per layer: dense in=" << iod.in << " out=" << iod.out
      << "; low-rank in=" << iol.in << " out=" << iol.out << "\n";
  out << "roofline lower bound: dense="
      << fmt("%.6g", roofline_latency(double(fd), double(iod.in + iod.out), hw))
      << " s; low-rank="
      << fmt("%.6g", roofline_latency(double(fl), double(iol.in + iol.out), hw))
      << " s\n";
  out << "decoder: kv cache=" << decoder_kv_cache_bytes(g)
      << " B; prefill=" << decoder_prefill_bytes(g) << " B; decode step "
      << g.seq_len << "=" << decoder_decode_step_bytes(g, g.seq_len) << " B\n";
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out,
            std::ostream& err) {
  CLI::App app{"streamed low-rank transformer inference toolkit"};
  app.require_subcommand(1);
  app.fallthrough();  // lets --config appear after the subcommand
  app.set_config("--config", "",
                 "plain-text config file (key=value; [subcommand] sections)");

  Options o;
  auto add_geometry = [&](CLI::App* c) {
    c->add_option("--batch", o.batch, "batch size B");
    c->add_option("--seqlen", o.seqlen, "sequence length M");
    c->add_option("--d-model", o.d_model, "model width");
    c->add_option("--d-ff", o.d_ff, "feed-forward width");
    c->add_option("--heads", o.heads, "attention heads");
    c->add_option("--groups", o.groups, "factor groups (0: per-head)");
    c->add_option("--rank", o.rank, "per-group rank");
    c->add_option("--layers", o.layers, "layer count");
    c->add_option("--seed", o.seed, "random seed");
  };
  auto add_tiles = [&](CLI::App* c) {
    c->add_option("--tile-bm", o.plan.bm, "row-tile height");
    c->add_option("--tile-br", o.plan.br, "key-tile width");
    c->add_option("--tile-bdf", o.plan.bdf, "feature-block width");
    c->add_option("--sram-budget", o.plan.sram_budget_bytes,
                  "on-chip byte budget");
  };

  CLI::App* compress = app.add_subcommand(
      "compress", "factorize a dense model (file or synthetic) into a model file");
  add_geometry(compress);
  add_tiles(compress);
  compress->add_option("--model", o.model_path,
                       "dense model file; omitted: synthesize from geometry");
  compress->add_option("--proj-rank", o.proj_rank,
                       "output-projection rank (0: derived)");
  compress->add_option("--ffn-rank", o.ffn_rank, "FFN rank (0: derived)");
  compress->add_option("--mode", o.mode_str,
                       "intended run mode recorded in the sidecar");
  compress->add_option("--out", o.out_path, "output model path")->required();

  CLI::App* verify = app.add_subcommand("verify", "run property suites");
  verify->add_option("--suite", o.suite,
                     "one of attn|ffn|meter|threshold (default: all)");
  verify->add_option("--seed", o.seed, "random seed");

  CLI::App* bench =
      app.add_subcommand("bench", "sweep a grid and emit a CSV report");
  add_geometry(bench);
  add_tiles(bench);
  bench->add_option("--b-list", o.b_list, "batch sizes")->delimiter(',');
  bench->add_option("--m-list", o.m_list, "sequence lengths")->delimiter(',');
  bench->add_option("--r-list", o.r_list, "ranks")->delimiter(',');
  bench->add_option("--modes", o.mode_list,
                    "subset of dense,naive,flash-v1,flash-v2 (default: all)")
      ->delimiter(',');
  bench->add_option("--reps", o.reps, "timing repetitions per row");
  bench->add_option("--out", o.out_path, "CSV path (default: stdout)");

  CLI::App* plan =
      app.add_subcommand("plan", "print closed-form analytics for a geometry");
  add_geometry(plan);
  plan->add_option("--peak-flops", o.peak_flops, "hardware peak FLOP/s");
  plan->add_option("--beta", o.beta, "memory bandwidth, bytes/s");

  std::vector<const char*> argv;
  argv.reserve(args.size() + 1);
  argv.push_back("flashsvd");
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(int(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 2;
  }

  try {
    if (compress->parsed()) return cmd_compress(o, out);
    if (verify->parsed()) return cmd_verify(o, out);
    if (bench->parsed()) return cmd_bench(o, out);
    if (plan->parsed()) return cmd_plan(o, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return e.kind() == ErrorKind::Io ? 3 : 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}

int run_cli(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace flashsvd::cli
