#include <iostream>

#include <CLI11.hpp>

#include "cpbert/cli.hpp"

namespace fs = std::filesystem;
using namespace cpbert;

namespace {

void add_common(CLI::App* cmd, cli::Overrides& o, fs::path* config) {
  if (config) cmd->add_option("--config", *config, "run config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "override the run seed");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--max-seq-len", o.max_seq_len, "segment length in notes (e.g. 512, 1024, 2048)");
  cmd->add_option("--mode", o.mode, "corruption mode")->check(CLI::IsMember({"rc", "rc-inf", "mlm"}));
  cmd->add_option("--ranges", o.ranges, "corruption ranges pos,pit,dur (integers or inf)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cpbert: compound-word note tokenization, denoising pre-training and fine-tuning"};
  app.require_subcommand(1);
  cli::Overrides o;
  fs::path config;

  auto* ingest = app.add_subcommand("ingest", "tokenize MIDI / text scores into shards");
  std::vector<fs::path> inputs;
  ingest->add_option("inputs", inputs, "score files or directories")->required();
  add_common(ingest, o, nullptr);

  auto* pre = app.add_subcommand("pretrain", "pre-train the backbone");
  add_common(pre, o, &config);

  auto* fine = app.add_subcommand("finetune", "fine-tune on a downstream task");
  add_common(fine, o, &config);

  auto* eval = app.add_subcommand("eval", "score a fine-tuned model");
  add_common(eval, o, &config);

  auto* inspect = app.add_subcommand("inspect", "statistics and plot data for shards, checkpoints and logs");
  fs::path shards, checkpoint, metrics_log;
  inspect->add_option("--shards", shards, "manifest.json of a token corpus");
  inspect->add_option("--checkpoint", checkpoint, "checkpoint file");
  inspect->add_option("--log", metrics_log, "metrics.jsonl");
  add_common(inspect, o, nullptr);

  auto* synth = app.add_subcommand("synth", "write a synthetic text-score corpus");
  std::size_t n_pieces = 200;
  synth->add_option("--pieces", n_pieces, "number of pieces");
  add_common(synth, o, nullptr);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*ingest) {
      if (!o.out) throw ValidationError("ingest needs --out");
      std::cout << "# resolved ingest config\n"
                << nlohmann::json{{"inputs", [&] {
                                     std::vector<std::string> v;
                                     for (const auto& p : inputs) v.push_back(p.string());
                                     return v;
                                   }()},
                                  {"out", o.out->string()}}
                       .dump(2)
                << "\n";
      const auto r = cli::ingest(inputs, *o.out, std::cerr);
      for (const auto& e : r.errors) std::cerr << "error: " << e << "\n";
      if (!r.manifest.is_null())
        std::cout << "pieces " << r.manifest["pieces"].size() << ", notes " << r.manifest["total_notes"] << ", "
                  << r.manifest["checksum"].get<std::string>() << "\n";
      return r.errors.empty() ? 0 : 1;
    }
    if (*pre) {
      cli::cmd_pretrain(cli::resolve_pretrain(config, o), std::cout);
      return 0;
    }
    if (*fine) {
      cli::cmd_finetune(cli::resolve_task(config, o), std::cout);
      return 0;
    }
    if (*eval) {
      cli::cmd_eval(config, o, std::cout);
      return 0;
    }
    if (*inspect) {
      const fs::path out = o.out.value_or("inspect_out");
      if (shards.empty() && checkpoint.empty() && metrics_log.empty())
        throw ValidationError("inspect needs --shards, --checkpoint or --log");
      if (!shards.empty()) {
        CorruptionConfig cc;
        if (o.mode) cc.mode = corruption_mode_from_string(*o.mode);
        if (o.ranges) {
          const auto r = cli::parse_ranges(*o.ranges);
          cc.range_pos = r[0];
          cc.range_pit = r[1];
          cc.range_dur = r[2];
        }
        cc.seed = o.seed.value_or(0);
        const fs::path m = fs::is_directory(shards) ? shards / "manifest.json" : shards;
        cli::inspect_shards(m, cc, o.max_seq_len.value_or(512), out, std::cout);
      }
      if (!checkpoint.empty()) cli::inspect_checkpoint(checkpoint, std::cout);
      if (!metrics_log.empty()) cli::inspect_log(metrics_log, out, std::cout);
      return 0;
    }
    if (*synth) {
      if (!o.out) throw ValidationError("synth needs --out");
      cli::cmd_synth(n_pieces, o.seed.value_or(0), *o.out, std::cout);
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
