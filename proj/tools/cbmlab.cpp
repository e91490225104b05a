// Copyright 2026 The cbmlab Authors.
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

// cbmlab: command-line driver for the experiment pipeline.

#include <cstdint>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cbmlab.hpp"
#include "process.hpp"

namespace {

using cbmlab::json;

struct Options {
  std::string config_path;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> models;
  std::optional<std::string> noise;
  std::optional<std::string> fractions;
  std::optional<std::size_t> trials;
  bool no_plots = false;
};

std::vector<double> parse_list(const std::string& text, const std::string& flag) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(cell, &used));
      if (used != cell.size()) throw std::invalid_argument(cell);
    } catch (const std::exception&) {
      throw cbmlab::ConfigError(flag + ": bad number '" + cell + "'");
    }
  }
  if (out.empty()) throw cbmlab::ConfigError(flag + ": empty list");
  return out;
}

json config_document(const Options& o) {
  json doc = json::object();
  if (!o.config_path.empty()) {
    doc = cbmlab::read_json(o.config_path);
  } else {
    doc["schema_version"] = cbmlab::kSchemaVersion;
  }
  if (!doc.is_object()) throw cbmlab::ConfigError("config " + o.config_path + ": top level must be an object");
  if (o.seed) doc["seed"] = *o.seed;
  if (o.out) doc["output_dir"] = *o.out;
  if (o.noise) doc["interventions"]["noise_levels"] = parse_list(*o.noise, "--noise");
  if (o.fractions) doc["interventions"]["fractions"] = parse_list(*o.fractions, "--fractions");
  if (o.trials) doc["interventions"]["trials"] = *o.trials;
  return doc;
}

cbmlab::StageContext context(const Options& o) {
  cbmlab::StageContext ctx = cbmlab::make_context(cbmlab::load_config_json(config_document(o)));
  ctx.only_models = o.models;
  ctx.plots = !o.no_plots;
  return ctx;
}

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config_path, "experiment config (JSON)");
  cmd->add_option("--out", o.out, "output directory (overrides output_dir)");
  cmd->add_option("--seed", o.seed, "master seed (overrides seed)");
  cmd->add_option("--model", o.models, "restrict to these model kinds")->delimiter(',');
  cmd->add_option("--noise", o.noise, "comma-separated shift levels, 0 = clean");
  cmd->add_option("--fractions", o.fractions, "comma-separated intervention fractions");
  cmd->add_option("--trials", o.trials, "intervention trials per curve");
  cmd->add_flag("--no-plots", o.no_plots, "skip SVG output");
}

}  // namespace

int main(int argc, char** argv) {
  cbmlab_tools::tune_allocator();
  CLI::App app{"cbmlab: concept bottleneck experiments on synthetic tasks"};
  app.require_subcommand(1);
  Options opts;
  std::string chosen;
  for (const char* name : {"gen-data", "train", "calibrate", "evaluate", "curve", "report", "run"}) {
    CLI::App* cmd = app.add_subcommand(name);
    add_common(cmd, opts);
    cmd->callback([&chosen, name] { chosen = name; });
  }
  CLI11_PARSE(app, argc, argv);

  try {
    const cbmlab::StageContext ctx = context(opts);
    if (chosen == "gen-data") {
      cbmlab::stage_gen_data(ctx);
    } else if (chosen == "train") {
      cbmlab::stage_train(ctx);
    } else if (chosen == "calibrate") {
      cbmlab::stage_calibrate(ctx);
    } else if (chosen == "evaluate") {
      cbmlab::stage_evaluate(ctx);
    } else if (chosen == "curve") {
      cbmlab::stage_curve(ctx);
    } else if (chosen == "report") {
      cbmlab::stage_report(ctx);
    } else {
      cbmlab::run_experiment(ctx);
    }
    std::cout << chosen << ": wrote " << ctx.paths.root.string() << " (config " << ctx.hash << ")\n";
  } catch (const cbmlab::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
