// Command-line driver for the extraction-defense pipeline.

#include <csignal>
#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "misguide/errors.hpp"
#include "misguide/io.hpp"
#include "misguide/pipeline.hpp"
#include "misguide/runconfig.hpp"

using namespace misguide;

namespace {

Server* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

void log_line(const std::string& line) {
  std::fprintf(stderr, "%s\n", line.c_str());
  std::fflush(stderr);
}

std::string quoted(std::string s) {
  for (auto& c : s)
    if (c == '"' || c == '\n') c = '\'';
  return "\"" + s + "\"";
}

int fail(const char* kind, const std::string& message, int code) {
  log_line(std::string("error kind=") + kind + " message=" + quoted(message));
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Out-of-distribution gated defense against model extraction"};
  app.require_subcommand(0, 1);
  std::string config_path;
  std::string run_dir = "run";
  bool print_config = false;
  app.add_option("-c,--config", config_path, "JSON run configuration (defaults apply to missing keys)");
  app.add_option("-r,--run-dir", run_dir, "Run directory for artifacts")->capture_default_str();
  app.add_flag("--print-effective-config", print_config, "Print the fully defaulted configuration and exit");
  app.set_version_flag("--version", kToolVersion);

  struct Step {
    const char* name;
    const char* help;
    void (*fn)(RunDir&);
  };
  const Step steps[] = {
      {"gen-data", "Generate (or ingest) ID data, surrogate set and OOD pools", gen_data},
      {"train-victim", "Train the victim classifier", train_victim_step},
      {"train-extractor", "Train the auxiliary feature extractor", train_extractor_step},
      {"fit-ood", "Fit class-conditional Gaussians on extractor embeddings", fit_ood_step},
      {"calibrate", "Set the OOD threshold from held-out ID embeddings", calibrate_step},
      {"attack", "Run one extraction attack against the defended victim", attack_step},
      {"sweep", "Sweep the randomization probability for every configured attacker", sweep_step},
      {"report", "Summarize OOD quality, benign accuracy and sweep results", report_step},
  };
  for (const auto& s : steps) app.add_subcommand(s.name, s.help);
  app.add_subcommand("serve", "Serve the defended victim over HTTP");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return fail("UsageError", e.what(), 2);
  }

  try {
    std::string text = "{}";
    if (!config_path.empty()) text = read_file(config_path);
    RunConfig cfg = parse_run_config(text);
    if (print_config) {
      std::cout << effective_config_text(cfg);
      return 0;
    }
    if (app.get_subcommands().empty()) return fail("UsageError", "a subcommand is required (see --help)", 2);
    RunDir run(run_dir, cfg, log_line);
    for (const auto& s : steps) {
      if (app.got_subcommand(s.name)) {
        run.log(std::string("info event=start step=") + s.name + " run_dir=" + run.dir().string());
        s.fn(run);
        run.log(std::string("info event=done step=") + s.name);
      }
    }
    if (app.got_subcommand("serve")) {
      auto server = make_server(run);
      g_server = server.get();
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      run.log("info event=serve host=" + cfg.serve.host + " port=" + std::to_string(cfg.serve.port));
      server->run();
      g_server = nullptr;
    }
    return 0;
  } catch (const ConfigInvalid& e) {
    return fail(e.kind(), e.what(), 2);
  } catch (const MissingArtifact& e) {
    return fail(e.kind(), e.what(), 3);
  } catch (const Error& e) {
    return fail(e.kind(), e.what(), 1);
  } catch (const std::exception& e) {
    return fail("InternalError", e.what(), 1);
  }
}
