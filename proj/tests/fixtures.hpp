#pragma once

// A reduced desk testbed shared by tests that need a defended victim.

#include "misguide/testbed.hpp"

namespace fixtures {

inline misguide::TestbedConfig small_config() {
  misguide::TestbedConfig cfg;
  cfg.train_per_class = 200;
  cfg.test_per_class = 100;
  cfg.surrogate_per_class = 50;
  cfg.victim_train.epochs = 15;
  cfg.extractor_train.epochs = 15;
  return cfg;
}

// Built once per test binary.
inline const misguide::Testbed& small_testbed() {
  static const misguide::Testbed tb = misguide::build_testbed(small_config());
  return tb;
}

}  // namespace fixtures
