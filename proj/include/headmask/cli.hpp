#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "headmask/data.hpp"
#include "headmask/model.hpp"
#include "headmask/training.hpp"

namespace headmask {

struct TaskConfig {
  std::string task = "reversal";  // reversal, copy or tsv
  int vocab = 64;
  int min_len = 5;
  int max_len = 12;
  int pairs = 20000;
  // TSV file or directory; used when task = tsv.
  std::string data;
};

// Everything a run depends on, as one flat key=value file. Model vocab sizes
// of 0 are filled in from the corpus.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  TaskConfig task;

  RunConfig();
  void set(const std::string& key, const std::string& value);
  std::vector<std::pair<std::string, std::string>> entries() const;
};

RunConfig read_run_config(const std::filesystem::path& path);
void write_run_config(const RunConfig& config, const std::filesystem::path& path);

// Generated corpora use the run seed.
ParallelCorpus load_task_data(const RunConfig& config);

// Exit codes: 0 ok, 1 internal, 2 usage, 3 data, 4 numeric.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace headmask
