#pragma once

#include <filesystem>
#include <string>

#include "octet/generator.hpp"
#include "octet/models.hpp"

namespace octet::test {

inline blob::GeneratorConfig tiny_generator_config() {
  blob::GeneratorConfig c;
  c.height = 16;
  c.width = 32;
  c.num_blobs = 6;
  c.style_dim = 8;
  c.noise_dim = 8;
  c.layout_hidden = 16;
  c.synth_channels = 8;
  c.disc_channels = 8;
  return c;
}

inline models::NetConfig tiny_net_config() {
  models::NetConfig c;
  c.height = 16;
  c.width = 32;
  c.channels = 4;
  return c;
}

inline blob::Generator tiny_generator(uint64_t seed = 0) {
  torch::manual_seed(seed);
  blob::Generator g(tiny_generator_config());
  g->eval();
  return g;
}

inline models::Classifier tiny_classifier(uint64_t seed = 0) {
  torch::manual_seed(seed);
  models::Classifier m(tiny_net_config());
  m->eval();
  return m;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("octet_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace octet::test
