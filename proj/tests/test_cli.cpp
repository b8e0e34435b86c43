#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "mkd/config.hpp"
#include "mkd/errors.hpp"
#include "test_util.hpp"

using namespace mkd;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Small but complete run settings, as config-file text.
std::string small_run(const fs::path& data, const fs::path& out) {
  return "data_root=" + data.string() + "\noutput_dir=" + out.string() +
         "\nimage_size=16\nnum_classes=3\ntarget_count=3\nassistant_count=3\ntest_count=2\n"
         "gen_width=4\ngen_depth=1\ndisc_width=4\nseg_width=4\nseg_depth=1\nepochs=1\nseeds=7\n";
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(MKD_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("empty config resolves to the default hyperparameters") {
  const RunConfig c = parse_config(Command::synth, "data_root=x\n");
  CHECK(c.training.lambda_cyc == 10.0);
  CHECK(c.training.lambda_kd1 == 0.5);
  CHECK(c.training.lambda_kd2 == 1.0);
  CHECK(c.training.lr == 2e-4);
  CHECK(c.training.segmentor_decay == 0.9);
  CHECK(c.training.decay_every == 2);
  CHECK(c.training.batch_size == 1);
  CHECK(c.training.replay_buffer_size == 50);
  CHECK(c.training.mode == TrainingMode::mkd);
  CHECK(c.training.gan_variant == GanVariant::vanilla);
}

TEST_CASE("flags override file values") {
  const RunConfig c = parse_config(Command::synth, "data_root=x\nlambda_cyc=3\n# comment\n\nepochs=4\n",
                                   {{"lambda_cyc", "7.5"}});
  CHECK(c.training.lambda_cyc == 7.5);
  CHECK(c.training.epochs == 4);
}

TEST_CASE("config errors name the key") {
  auto message = [](const std::string& text) {
    try {
      parse_config(Command::train, text);
    } catch (const UsageError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  CHECK(message("data_root=a\noutput_dir=b\nfoo=1\n").find("'foo'") != std::string::npos);
  CHECK(message("data_root=a\noutput_dir=b\nepochs=ten\n").find("'epochs'") != std::string::npos);
  CHECK(message("data_root=a\noutput_dir=b\nmode=gan\n").find("'mode'") != std::string::npos);
  CHECK(message("data_root=a\noutput_dir=b\naugment=maybe\n").find("'augment'") != std::string::npos);
  CHECK(message("output_dir=b\n").find("'data_root'") != std::string::npos);
  CHECK(message("data_root=a\noutput_dir=b\njust text\n").find("line 3") != std::string::npos);
  CHECK(message("data_root=a\noutput_dir=b\nlr=-1\n").find("lr") != std::string::npos);
  CHECK_THROWS_AS(parse_config(Command::eval, "data_root=a\noutput_dir=b\n"), UsageError);
  CHECK_THROWS_AS(parse_config(Command::sweep, "output_dir=b\nsweep_counts=10,50\n"), UsageError);
  CHECK_THROWS_AS(parse_command("fit"), UsageError);
}

TEST_CASE("echoed config parses back to the same values") {
  RunConfig c = parse_config(Command::ablate, "output_dir=o\nseeds=3,4,5\nmode=kd_r2s_only\nlr=0.000123\n"
                                              "gan_variant=least_squares\naggregation=macro\nswap_styles=true\n");
  const RunConfig back = parse_config(Command::ablate, echo_config(c));
  CHECK(echo_config(back) == echo_config(c));
  CHECK(back.seeds == std::vector<std::uint64_t>{3, 4, 5});
  CHECK(back.training.seed == 3);
  CHECK(back.training.lr == 0.000123);
  for (const std::string& key : config_keys()) CHECK(get_config_value(back, key) == get_config_value(c, key));
}

TEST_CASE("synth, train, eval and report end to end") {
  const fs::path root = test::scratch_dir("cli-e2e");
  const fs::path data = root / "data", out = root / "run";
  const std::string base = small_run(data, out);
  std::ostringstream log;

  CHECK(dispatch(parse_config(Command::synth, base), log) == 0);
  for (const char* sub : {"target", "assistant", "test"}) CHECK(fs::exists(data / sub / "meta.txt"));
  CHECK(read_dataset(data / "target").size() == 3);

  CHECK(dispatch(parse_config(Command::train, base + "checkpoint_every=1\n"), log) == 0);
  CHECK(fs::exists(out / "checkpoint.bin"));
  CHECK(fs::exists(out / "checkpoints" / "checkpoint_epoch_001.bin"));
  std::ifstream metrics(out / "metrics.log");
  std::string line;
  int lines = 0;
  while (std::getline(metrics, line)) {
    CHECK_NOTHROW(parse_metrics_line(line));
    ++lines;
  }
  CHECK(lines == 3);
  const std::string manifest = slurp(out / "manifest_train.txt");
  CHECK(manifest.find("# version=" + version_string()) != std::string::npos);
  CHECK(manifest.find("# seed=7") != std::string::npos);
  CHECK(manifest.find("# wall_time_s=") != std::string::npos);

  CHECK(dispatch(parse_config(Command::eval, base + "checkpoint=" + (out / "checkpoint.bin").string() + "\n"), log) ==
        0);
  CHECK(read_reports_csv(out / "eval.csv").size() == 3);

  const fs::path rep = root / "report";
  CHECK(dispatch(parse_config(Command::report, "input_dir=" + out.string() + "\noutput_dir=" + rep.string() + "\n"),
                 log) == 0);
  for (const char* f : {"loss_generators.svg", "loss_segmentors.svg", "dice_bars.svg", "report.txt"}) {
    CHECK(fs::exists(rep / f));
  }
}

TEST_CASE("a run is reproducible from its manifest alone") {
  const fs::path root = test::scratch_dir("cli-manifest");
  const fs::path data = root / "data", first = root / "first", second = root / "second";
  std::ostringstream log;
  dispatch(parse_config(Command::synth, small_run(data, first)), log);
  dispatch(parse_config(Command::train, small_run(data, first)), log);
  const RunConfig again =
      parse_config(Command::train, slurp(first / "manifest_train.txt"), {{"output_dir", second.string()}});
  dispatch(again, log);
  CHECK(slurp(first / "checkpoint.bin") == slurp(second / "checkpoint.bin"));
  CHECK(slurp(first / "metrics.log") == slurp(second / "metrics.log"));
}

TEST_CASE("train with zero epochs writes the initial networks") {
  const fs::path root = test::scratch_dir("cli-zero");
  const fs::path data = root / "data", out = root / "run";
  std::ostringstream log;
  dispatch(parse_config(Command::synth, small_run(data, out)), log);
  CHECK(dispatch(parse_config(Command::train, small_run(data, out) + "epochs=0\n"), log) == 0);
  const TrainerState s = checkpoint_load(out / "checkpoint.bin");
  TrainingConfig t = parse_config(Command::train, small_run(data, out)).training;
  const TrainerState init = initialize_state(t, 3);
  for (int k = 0; k < kNetworkCount; ++k) CHECK(s.nets[k].fingerprint() == init.nets[k].fingerprint());
}

TEST_CASE("baseline training does not need assistant data on disk") {
  const fs::path root = test::scratch_dir("cli-baseline");
  const fs::path data = root / "data", out = root / "run";
  std::ostringstream log;
  dispatch(parse_config(Command::synth, small_run(data, out)), log);
  fs::remove_all(data / "assistant");
  CHECK(dispatch(parse_config(Command::train, small_run(data, out) + "mode=baseline\n"), log) == 0);
  CHECK_THROWS_AS(dispatch(parse_config(Command::train, small_run(data, out)), log), UsageError);
}

TEST_CASE("missing inputs are usage errors") {
  const fs::path root = test::scratch_dir("cli-missing");
  std::ostringstream log;
  CHECK_THROWS_AS(dispatch(parse_config(Command::train, small_run(root / "nope", root / "o")), log), UsageError);
  CHECK_THROWS_AS(
      dispatch(parse_config(Command::eval, small_run(root / "nope", root / "o") + "checkpoint=missing.bin\n"), log),
      UsageError);
  CHECK_THROWS_AS(
      dispatch(parse_config(Command::report, "input_dir=" + (root / "none").string() + "\noutput_dir=" + (root / "x").string() + "\n"), log),
      UsageError);
}

TEST_CASE("command-line binary exit codes") {
  const fs::path root = test::scratch_dir("cli-binary");
  const std::string data = (root / "data").string();
  CHECK(run_cli("--version") == 0);
  CHECK(run_cli("synth --data_root " + data + " --image_size 16 --target_count 2 --assistant_count 2 --test_count 1") ==
        0);
  CHECK(fs::exists(root / "data" / "manifest_synth.txt"));
  CHECK(run_cli("eval --data_root " + data + " --output_dir " + (root / "o").string()) == 2);
  CHECK(run_cli("train --data_root " + data + " --output_dir " + (root / "o").string() + " --epochs x") == 2);
  CHECK(run_cli("train --data_root " + data + " --config " + (root / "missing.cfg").string()) == 2);
  CHECK(run_cli("frobnicate") != 0);
  CHECK(run_cli("") != 0);
}
