#include <sys/wait.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "cpbert/checkpoint.hpp"
#include "cpbert/cli.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliResult {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_json(const fs::path& p, const json& j) { std::ofstream(p) << j.dump(2); }

class CliTest : public ::testing::Test {
 protected:
  static fs::path root;

  static CliResult cli(const std::string& args) {
    static int counter = 0;
    const fs::path o = root / ("stdout" + std::to_string(counter) + ".txt");
    const fs::path e = root / ("stderr" + std::to_string(counter++) + ".txt");
    const std::string cmd = "CPBERT_LOG=0 " + std::string(CPBERT_CLI) + " " + args + " > " + o.string() + " 2> " + e.string();
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(o), slurp(e)};
  }

  static json pretrain_config(const std::string& out) {
    return {{"corpus", (root / "shards").string()},
            {"seed", 17},
            {"out", out},
            {"model", {{"n_layers", 1}, {"d_model", 16}, {"n_heads", 2}, {"ffn_dim", 32}, {"embed_dims", 8}}},
            {"optimizer", {{"lr", 1e-3}}},
            {"schedule", {{"steps", 6}, {"batch_size", 2}, {"eval_interval", 3}, {"max_seq_len", 32}, {"max_valid_segments", 4}}}};
  }

  // Register labels (1 for pitch >= 60) in token order for each synthetic score.
  static void write_dataset() {
    json pieces = json::array();
    for (const auto& f : fs::directory_iterator(root / "scores")) {
      const auto tokens = cpbert::tokenize_score(cpbert::cli::load_score(f.path()));
      std::vector<int> labels;
      for (const auto& t : tokens) labels.push_back(t.token.pit >= 60 ? 1 : 0);
      const std::string id = f.path().stem().string();
      write_json(root / "labels" / (id + ".json"), {{"piece", id}, {"level", "note"}, {"labels", labels}});
      write_json(root / "labels" / (id + ".seq.json"), {{"piece", id}, {"level", "sequence"}, {"labels", {id.back() % 2}}});
      pieces.push_back({{"id", id}, {"score", f.path().string()}, {"labels", (root / "labels" / (id + ".json")).string()}});
    }
    std::sort(pieces.begin(), pieces.end(), [](const json& a, const json& b) { return a["id"] < b["id"]; });
    write_json(root / "dataset.json", {{"pieces", pieces}});
    for (auto& p : pieces) p["labels"] = (root / "labels" / (p["id"].get<std::string>() + ".seq.json")).string();
    write_json(root / "dataset_seq.json", {{"pieces", pieces}});
  }

  static void SetUpTestSuite() {
    root = fs::temp_directory_path() / "cpbert_cli_test";
    fs::remove_all(root);
    fs::create_directories(root / "labels");
    ASSERT_EQ(cli("synth --pieces 9 --seed 4 --out " + (root / "scores").string()).code, 0);
    ASSERT_EQ(cli("ingest " + (root / "scores").string() + " --out " + (root / "shards").string()).code, 0);
    write_json(root / "pretrain.json", pretrain_config("pre"));
    ASSERT_EQ(cli("pretrain --config " + (root / "pretrain.json").string()).code, 0);
    write_dataset();
  }

  static void TearDownTestSuite() { fs::remove_all(root); }
};

fs::path CliTest::root;

}  // namespace

TEST_F(CliTest, IngestWritesManifestAndIsDeterministic) {
  const json m = json::parse(slurp(root / "shards" / "manifest.json"));
  EXPECT_EQ(m["pieces"].size(), 9u);
  std::size_t sum = 0;
  for (const auto& p : m["pieces"]) sum += p["n_notes"].get<std::size_t>();
  EXPECT_EQ(sum, m["total_notes"].get<std::size_t>());

  const CliResult r = cli("ingest " + (root / "scores").string() + " --out " + (root / "shards2").string());
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out.rfind("# resolved ingest config", 0), 0u);
  for (const auto& f : fs::directory_iterator(root / "shards"))
    EXPECT_EQ(slurp(f.path()), slurp(root / "shards2" / f.path().filename())) << f.path();
}

TEST_F(CliTest, IngestSingleMidiFile) {
  const CliResult r = cli("ingest " + std::string(CPBERT_TEST_DATA) + "/two_track.mid --out " + (root / "midi_shards").string());
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json::parse(slurp(root / "midi_shards" / "manifest.json"))["pieces"].size(), 1u);
}

TEST_F(CliTest, IngestErrorsGiveNonzeroExit) {
  fs::create_directories(root / "empty");
  CliResult r = cli("ingest " + (root / "empty").string() + " --out " + (root / "x").string());
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("error:"), std::string::npos);

  fs::create_directories(root / "mixed");
  fs::copy_file(root / "scores" / "synth-0000.json", root / "mixed" / "good.json");
  std::ofstream(root / "mixed" / "bad.mid") << "not a midi file";
  r = cli("ingest " + (root / "mixed").string() + " --out " + (root / "mixed_out").string());
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("bad.mid"), std::string::npos);
  EXPECT_EQ(json::parse(slurp(root / "mixed_out" / "manifest.json"))["pieces"].size(), 1u);

  EXPECT_NE(cli("ingest " + (root / "missing").string() + " --out " + (root / "y").string()).code, 0);
}

TEST_F(CliTest, PretrainOutputsAndEcho) {
  const fs::path out = root / "pre";
  EXPECT_TRUE(fs::exists(out / "checkpoint.ckpt"));
  EXPECT_TRUE(fs::exists(out / "metrics.jsonl"));
  const json resolved = json::parse(slurp(out / "resolved_config.json"));
  EXPECT_EQ(resolved["seed"], 17);
  EXPECT_EQ(resolved["schedule"]["steps"], 6);
  std::istringstream log(slurp(out / "metrics.jsonl"));
  std::string line;
  std::size_t n = 0;
  while (std::getline(log, line)) {
    const json j = json::parse(line);
    EXPECT_TRUE(j.contains("step") && j.contains("split") && j.contains("metric") && j.contains("value"));
    ++n;
  }
  EXPECT_GT(n, 0u);
}

TEST_F(CliTest, PretrainSeedRepeatAndEchoedConfigReproduce) {
  write_json(root / "pretrain_b.json", pretrain_config("pre_b"));
  ASSERT_EQ(cli("pretrain --config " + (root / "pretrain_b.json").string()).code, 0);
  EXPECT_EQ(slurp(root / "pre" / "checkpoint.ckpt"), slurp(root / "pre_b" / "checkpoint.ckpt"));
  EXPECT_EQ(slurp(root / "pre" / "metrics.jsonl"), slurp(root / "pre_b" / "metrics.jsonl"));

  // the echoed configuration is itself a runnable config
  fs::copy_file(root / "pre" / "resolved_config.json", root / "echoed.json");
  ASSERT_EQ(cli("pretrain --config " + (root / "echoed.json").string() + " --out " + (root / "pre_c").string()).code, 0);
  EXPECT_EQ(slurp(root / "pre" / "checkpoint.ckpt"), slurp(root / "pre_c" / "checkpoint.ckpt"));

  ASSERT_EQ(cli("pretrain --config " + (root / "pretrain_b.json").string() + " --seed 18 --out " + (root / "pre_d").string()).code, 0);
  EXPECT_NE(slurp(root / "pre" / "checkpoint.ckpt"), slurp(root / "pre_d" / "checkpoint.ckpt"));
}

TEST_F(CliTest, PretrainModeSwitchAndOverrides) {
  const CliResult r = cli("pretrain --config " + (root / "pretrain.json").string() + " --mode mlm --max-seq-len 16 --out " +
                    (root / "pre_mlm").string());
  ASSERT_EQ(r.code, 0) << r.err;
  const json resolved = json::parse(slurp(root / "pre_mlm" / "resolved_config.json"));
  EXPECT_EQ(resolved["corruption"]["mode"], "mlm");
  EXPECT_EQ(resolved["schedule"]["max_seq_len"], 16);

  const CliResult inf = cli("pretrain --config " + (root / "pretrain.json").string() + " --mode rc-inf --ranges 4,inf,12 --out " +
                      (root / "pre_inf").string());
  ASSERT_EQ(inf.code, 0) << inf.err;
  EXPECT_EQ(json::parse(slurp(root / "pre_inf" / "resolved_config.json"))["corruption"]["ranges"][1], "inf");

  EXPECT_NE(cli("pretrain --config " + (root / "pretrain.json").string() + " --mode bert").code, 0);
  EXPECT_NE(cli("pretrain --config " + (root / "pretrain.json").string() + " --ranges 1,2").code, 0);
}

TEST_F(CliTest, PretrainConfigErrors) {
  json cfg = pretrain_config("never");
  cfg["corpus"] = (root / "no_such_shards").string();
  write_json(root / "bad_corpus.json", cfg);
  CliResult r = cli("pretrain --config " + (root / "bad_corpus.json").string());
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("not found"), std::string::npos);

  cfg = pretrain_config("never");
  cfg.erase("seed");
  write_json(root / "no_seed.json", cfg);
  r = cli("pretrain --config " + (root / "no_seed.json").string());
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("seed"), std::string::npos);

  cfg = pretrain_config("never");
  cfg["model"]["n_heads"] = 3;
  write_json(root / "bad_model.json", cfg);
  EXPECT_NE(cli("pretrain --config " + (root / "bad_model.json").string()).code, 0);
  EXPECT_NE(cli("pretrain --config " + (root / "absent.json").string()).code, 0);
}

TEST_F(CliTest, InspectShardsCheckpointAndLog) {
  const fs::path out = root / "inspect";
  CliResult r = cli("inspect --shards " + (root / "shards").string() + " --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const json m = json::parse(slurp(root / "shards" / "manifest.json"));
  const auto total = m["total_notes"].get<std::size_t>();
  EXPECT_NE(r.out.find("notes " + std::to_string(total)), std::string::npos);
  for (const char* attr : {"b", "pos", "pit", "dur"}) {
    std::istringstream in(slurp(out / (std::string("hist_") + attr + ".tsv")));
    std::string header;
    std::getline(in, header);
    std::size_t sum = 0;
    int value;
    std::size_t count;
    while (in >> value >> count) sum += count;
    EXPECT_EQ(sum, total) << attr;
    EXPECT_TRUE(fs::exists(out / (std::string("corruption_") + attr + ".tsv")));
  }
  EXPECT_TRUE(fs::exists(out / "audit_summary.json"));

  r = cli("inspect --checkpoint " + (root / "pre" / "checkpoint.ckpt").string());
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream ci(r.out);
  std::string key;
  std::size_t params = 0, expected = 1;
  while (ci >> key) {
    if (key == "parameters") ci >> params;
    if (key == "expected") ci >> expected;
  }
  EXPECT_EQ(params, expected);
  EXPECT_GT(params, 0u);

  r = cli("inspect --log " + (root / "pre" / "metrics.jsonl").string() + " --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(out / "curve_valid_accuracy.tsv"));
  EXPECT_TRUE(fs::exists(out / "curve_train_loss.tsv"));

  std::ofstream(root / "junk.ckpt") << "junk";
  EXPECT_NE(cli("inspect --checkpoint " + (root / "junk.ckpt").string()).code, 0);
  EXPECT_NE(cli("inspect").code, 0);
}

TEST_F(CliTest, FinetuneAndEvalOnMemorizedToyTask) {
  const json task{{"name", "register"}, {"level", "note"}, {"n_classes", 2}, {"metric", "accuracy"}};
  json cfg{{"seed", 3},
           {"task", task},
           {"checkpoint", (root / "pre" / "checkpoint.ckpt").string()},
           {"dataset", (root / "dataset.json").string()},
           {"out", (root / "ft").string()},
           {"split", {{"train", {"synth-0000", "synth-0001", "synth-0002", "synth-0003"}},
                      {"valid", {"synth-0000", "synth-0001"}},
                      {"test", {"synth-0004"}}}},
           {"optimizer", {{"lr", 3e-3}}},
           {"schedule", {{"steps", 150}, {"batch_size", 4}, {"eval_interval", 50}, {"max_seq_len", 64}}}};
  write_json(root / "ft.json", cfg);
  CliResult r = cli("finetune --config " + (root / "ft.json").string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.rfind("# resolved finetune config", 0), 0u);
  EXPECT_TRUE(fs::exists(root / "ft" / "task_model.ckpt"));
  EXPECT_EQ(cpbert::Checkpoint::load(root / "ft" / "task_model.ckpt").header["kind"], "task");

  cfg["eval_split"] = "train";
  write_json(root / "eval.json", cfg);
  cfg["checkpoint"] = (root / "ft" / "task_model.ckpt").string();
  write_json(root / "eval.json", cfg);
  r = cli("eval --config " + (root / "eval.json").string());
  ASSERT_EQ(r.code, 0) << r.err;
  const json rec = json::parse(slurp(root / "ft" / "eval.jsonl"));
  EXPECT_EQ(rec["split"], "train");
  EXPECT_GE(rec["value"].get<double>(), 0.95);

  // a pre-training checkpoint is not a task model
  cfg["checkpoint"] = (root / "pre" / "checkpoint.ckpt").string();
  write_json(root / "eval_bad.json", cfg);
  EXPECT_NE(cli("eval --config " + (root / "eval_bad.json").string()).code, 0);
}

TEST_F(CliTest, FinetuneKFoldReportsEveryFoldAndMean) {
  json cfg{{"seed", 5},
           {"task", {{"name", "parity"}, {"level", "sequence"}, {"n_classes", 2}, {"metric", "accuracy"}}},
           {"checkpoint", (root / "pre" / "checkpoint.ckpt").string()},
           {"dataset", (root / "dataset_seq.json").string()},
           {"out", (root / "kfold").string()},
           {"split", {{"folds", 3}, {"seed", 2}}},
           {"schedule", {{"steps", 4}, {"batch_size", 2}, {"eval_interval", 2}, {"max_seq_len", 32}}}};
  write_json(root / "kfold.json", cfg);
  const CliResult r = cli("finetune --config " + (root / "kfold.json").string());
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream in(slurp(root / "kfold" / "report.jsonl"));
  std::string line;
  std::vector<json> rows;
  while (std::getline(in, line)) rows.push_back(json::parse(line));
  ASSERT_EQ(rows.size(), 4u);
  double mean = 0;
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(rows[i]["fold"], i);
    const double v = rows[i]["value"].get<double>();
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    mean += v / 3;
    EXPECT_TRUE(fs::exists(root / "kfold" / ("task_model_fold" + std::to_string(i) + ".ckpt")));
  }
  EXPECT_EQ(rows[3]["fold"], "mean");
  EXPECT_NEAR(rows[3]["value"].get<double>(), mean, 1e-12);
  EXPECT_NE(r.out.find("mean"), std::string::npos);
}

TEST_F(CliTest, FinetuneRejectsMisalignedLabels) {
  json ds = json::parse(slurp(root / "dataset.json"));
  const std::string id = ds["pieces"][0]["id"];
  write_json(root / "labels" / "short.json", {{"piece", id}, {"level", "note"}, {"labels", {0, 1}}});
  ds["pieces"][0]["labels"] = (root / "labels" / "short.json").string();
  write_json(root / "dataset_bad.json", ds);
  const json cfg{{"seed", 1},
                 {"task", {{"name", "register"}, {"level", "note"}, {"n_classes", 2}, {"metric", "accuracy"}}},
                 {"checkpoint", (root / "pre" / "checkpoint.ckpt").string()},
                 {"dataset", (root / "dataset_bad.json").string()},
                 {"out", (root / "ft_bad").string()},
                 {"split", {{"folds", 3}, {"seed", 0}}}};
  write_json(root / "ft_bad.json", cfg);
  const CliResult r = cli("finetune --config " + (root / "ft_bad.json").string());
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("label/note count mismatch"), std::string::npos);

  json no_split = cfg;
  no_split["dataset"] = (root / "dataset.json").string();
  no_split.erase("split");
  write_json(root / "ft_nosplit.json", no_split);
  EXPECT_NE(cli("finetune --config " + (root / "ft_nosplit.json").string()).code, 0);
}

TEST_F(CliTest, VelocityLabelsComeFromMidi) {
  write_json(root / "ve_dataset.json",
             {{"pieces", {{{"id", "a"}, {"score", std::string(CPBERT_TEST_DATA) + "/two_track.mid"}},
                          {{"id", "b"}, {"score", std::string(CPBERT_TEST_DATA) + "/two_track.mid"}}}}});
  const json cfg{{"seed", 1},
                 {"task", {{"name", "VE"}}},
                 {"checkpoint", (root / "pre" / "checkpoint.ckpt").string()},
                 {"dataset", (root / "ve_dataset.json").string()},
                 {"out", (root / "ve").string()},
                 {"split", {{"train", {"a"}}, {"valid", {"b"}}, {"test", {"b"}}}},
                 {"schedule", {{"steps", 2}, {"batch_size", 1}, {"eval_interval", 1}, {"max_seq_len", 32}}}};
  write_json(root / "ve.json", cfg);
  const CliResult r = cli("finetune --config " + (root / "ve.json").string());
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(root / "ve" / "report.jsonl"));
}

TEST_F(CliTest, SynthAndUsageErrors) {
  EXPECT_NE(cli("").code, 0);
  EXPECT_NE(cli("synth --pieces 2").code, 0);
  EXPECT_NE(cli("frobnicate").code, 0);
  const CliResult r = cli("synth --pieces 2 --seed 4 --out " + (root / "synth2").string());
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(slurp(root / "synth2" / "synth-0001.json"), slurp(root / "scores" / "synth-0001.json"));
}
