#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <string>

#include "misguide/runconfig.hpp"
#include "misguide/serve.hpp"

namespace misguide {

inline constexpr const char* kToolVersion = "0.1.0";

/// Artifact file names inside a run directory.
namespace artifact {
inline constexpr const char* kDataSpec = "data_spec.json";
inline constexpr const char* kTrain = "data_train.csv";
inline constexpr const char* kTest = "data_test.csv";
inline constexpr const char* kSurrogate = "data_surrogate.csv";
inline constexpr const char* kOodUniform = "ood_pool_uniform.csv";
inline constexpr const char* kOodShifted = "ood_pool_shifted.csv";
inline constexpr const char* kVictim = "victim.json";
inline constexpr const char* kExtractor = "extractor.json";
inline constexpr const char* kOod = "ood.json";
inline constexpr const char* kClone = "clone.json";
inline constexpr const char* kAttackReport = "attack_report.json";
inline constexpr const char* kSweepCsv = "sweep.csv";
inline constexpr const char* kSweepJson = "sweep.json";
inline constexpr const char* kReport = "report.json";
inline constexpr const char* kManifest = "manifest.json";
inline constexpr const char* kConfig = "config.json";
}  // namespace artifact

/// One pipeline step's view of a run directory.
class RunDir {
 public:
  using Logger = std::function<void(const std::string&)>;

  RunDir(std::filesystem::path dir, RunConfig cfg, Logger log = {});

  const RunConfig& config() const { return cfg_; }
  const std::filesystem::path& dir() const { return dir_; }
  std::filesystem::path path(const std::string& name) const { return dir_ / name; }

  // Throws MissingArtifact naming the file and the step that produces it.
  std::filesystem::path require(const std::string& name) const;
  // Records an artifact (already written) in the manifest.
  void record(const std::string& name, const std::string& producer);
  void log(const std::string& line) const;

 private:
  void write_manifest() const;

  std::filesystem::path dir_;
  RunConfig cfg_;
  Logger log_;
  nlohmann::ordered_json manifest_;
};

std::uint64_t config_hash(const RunConfig& cfg);

void gen_data(RunDir& run);
void train_victim_step(RunDir& run);
void train_extractor_step(RunDir& run);
void fit_ood_step(RunDir& run);
void calibrate_step(RunDir& run);
void attack_step(RunDir& run);
void sweep_step(RunDir& run);
void report_step(RunDir& run);
// Loads the calibrated artifacts and returns an unstarted server.
std::unique_ptr<Server> make_server(RunDir& run);

}  // namespace misguide
