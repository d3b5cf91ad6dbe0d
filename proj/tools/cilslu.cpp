// Copyright 2026 The cilslu Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// cilslu: corpus generation, continual-learning runs, sweeps, evaluation and
// reporting. Outputs land under $CILSLU_OUTPUT_ROOT (default: the working
// directory). Exit codes follow the error category, see error.hpp.

#include <cilslu/runner.hpp>

#include <CLI11.hpp>

#include <iostream>

namespace {

using namespace cilslu;

int gen_data(const std::string& spec_path, const std::string& out) {
  CorpusSpec spec = spec_path == "default"
                        ? default_corpus_spec()
                        : corpus_spec_from_json(read_json_file(spec_path, ErrorKind::spec));
  const Corpus corpus = generate_corpus(spec);
  const fs::path dir = resolve(out);
  save_corpus(corpus, dir);
  std::cout << nlohmann::json{{"dir", dir.string()},
                              {"utterances", corpus.utterances.size()},
                              {"train", corpus.train.size()},
                              {"valid", corpus.valid.size()},
                              {"test", corpus.test.size()},
                              {"scenarios", corpus.scenario_names().size()},
                              {"vocabulary", Vocabulary::build(corpus).size()}}
                   .dump()
            << "\n";
  return 0;
}

int run(const std::string& config, bool resume, bool quiet) {
  RunOptions opt;
  opt.resume = resume;
  if (!quiet) opt.log = &std::cerr;
  for (const auto& cfg : expand_seeds(read_json_file(config))) {
    const RunResult r = run_experiment(cfg, opt);
    std::cout << r.summary_line << "\n";
  }
  return 0;
}

int run_sweep(const std::string& dir, const std::string& out, bool quiet) {
  RunOptions opt;
  if (!quiet) opt.log = &std::cerr;
  const SweepResult s = sweep(dir, opt);
  if (!out.empty()) write_text(resolve(out), s.table);
  std::cout << s.table;
  return 0;
}

int eval(const std::string& checkpoint, const std::string& split, const EvalOptions& opt) {
  std::cout << evaluate_checkpoint(checkpoint, parse_split(split), opt).dump() << "\n";
  return 0;
}

int run_report(const std::vector<std::string>& dirs, const std::string& out) {
  std::vector<fs::path> paths(dirs.begin(), dirs.end());
  const std::string table = report(paths);
  if (!out.empty()) write_text(resolve(out), table);
  std::cout << table;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Class-incremental spoken language understanding experiments"};
  app.require_subcommand(1);

  std::string spec_path, out_dir;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic corpus");
  gen->add_option("spec", spec_path, "Corpus spec JSON, or 'default'")->required();
  gen->add_option("out", out_dir, "Output directory (under the output root)")->required();

  std::string config;
  bool resume = false, quiet = false;
  auto* runc = app.add_subcommand("run", "Train and evaluate one experiment config");
  runc->add_option("config", config, "Experiment config JSON")->required()->check(CLI::ExistingFile);
  runc->add_flag("--resume", resume, "Continue from the last completed task");
  runc->add_flag("-q,--quiet", quiet, "No progress log");

  std::string config_dir, table_out;
  auto* sw = app.add_subcommand("sweep", "Run every config in a directory and compare");
  sw->add_option("config-dir", config_dir, "Directory of *.json configs")->required()->check(CLI::ExistingDirectory);
  sw->add_option("--out", table_out, "Also write the comparison table here");
  sw->add_flag("-q,--quiet", quiet, "No progress log");

  std::string checkpoint, split;
  EvalOptions eval_opt;
  auto* ev = app.add_subcommand("eval", "Score a saved model on a corpus split");
  ev->add_option("checkpoint", checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("split", split, "train, valid or test")->required();
  ev->add_option("--corpus", eval_opt.corpus_dir, "Corpus directory to use instead of the recorded one");
  ev->add_option("--beam", eval_opt.beam_width, "Beam width (default: the recorded one)");

  std::vector<std::string> run_dirs;
  auto* rep = app.add_subcommand("report", "Compare finished runs");
  rep->add_option("run-dir", run_dirs, "Run directories")->required();
  rep->add_option("--out", table_out, "Also write the table here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : exit_code(ErrorKind::usage);
  }

  try {
    if (*gen) return gen_data(spec_path, out_dir);
    if (*runc) return run(config, resume, quiet);
    if (*sw) return run_sweep(config_dir, table_out, quiet);
    if (*ev) return eval(checkpoint, split, eval_opt);
    if (*rep) return run_report(run_dirs, table_out);
  } catch (const Error& e) {
    std::cerr << "cilslu: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "cilslu: io error: " << e.what() << "\n";
    return exit_code(ErrorKind::io);
  } catch (const std::exception& e) {
    std::cerr << "cilslu: " << e.what() << "\n";
    return 1;
  }
  return exit_code(ErrorKind::usage);
}
