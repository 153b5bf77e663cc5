#include "vlab/model.hpp"

namespace vlab {

FusionMode parse_fusion(const std::string& s) {
  if (s == "baseline") return FusionMode::kBaseline;
  if (s == "visalign") return FusionMode::kVisAlign;
  throw ConfigError("unknown fusion mode '" + s + "' (expected baseline|visalign)");
}

void ModelConfig::validate() const {
  if (d_t <= 0 || d_v <= 0 || layers <= 0 || heads <= 0 || vocab <= 0 || max_seq <= 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (d_t % heads != 0) {
    throw ConfigError("d_t " + std::to_string(d_t) + " not divisible by heads " +
                      std::to_string(heads));
  }
  if (n_v < 1) {
    throw ConfigError("n_v must be >= 1, got " + std::to_string(n_v));
  }
}

void AttentionRecord::validate() const {
  if (weights.size() != size_t(layers) * heads * seq * seq) {
    throw DataError("attention record size " + std::to_string(weights.size()) +
                    " does not match " + std::to_string(layers) + "x" +
                    std::to_string(heads) + "x" + std::to_string(seq) + "^2");
  }
  if (layout.total() != seq) {
    throw DataError("attention record layout covers " + std::to_string(layout.total()) +
                    " positions, sequence has " + std::to_string(seq));
  }
  for (int l = 0; l < layers; ++l) {
    for (int h = 0; h < heads; ++h) {
      for (int q = 0; q < seq; ++q) {
        double sum = 0;
        for (int k = 0; k < seq; ++k) {
          const float w = at(l, h, q, k);
          if (k > q && w != 0.0f) {
            throw DataError("attention weight above the causal diagonal at layer " +
                            std::to_string(l) + " head " + std::to_string(h) + " (" +
                            std::to_string(q) + "," + std::to_string(k) + ")");
          }
          if (w < 0.0f) {
            throw DataError("negative attention weight");
          }
          sum += double(w);
        }
        if (std::abs(sum - 1.0) > 1e-5) {
          throw DataError("attention row does not sum to 1: layer " + std::to_string(l) +
                          " head " + std::to_string(h) + " query " + std::to_string(q) +
                          " sum " + std::to_string(sum));
        }
      }
    }
  }
}

}  // namespace vlab
