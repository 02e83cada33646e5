#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace rd {

struct BlockSpec {
  int out_channels = 0;
  int kernel = 3;
  int stride = 2;
  int padding = 1;
};

struct NormSpec {
  double momentum = 0.9;
  double epsilon = 1e-5;
};

// Architecture description of the shared teacher/student FCN: a stack of
// conv/norm/relu blocks, global average pooling, and a bias-free projection
// to embed_dim. Nothing in here depends on input resolution.
struct ModelConfig {
  std::vector<BlockSpec> blocks;
  int embed_dim = 64;
  int in_channels = 1;
  NormSpec norm;

  void validate() const;

  // Per-block spatial output sides for a square input of the given side.
  std::vector<int> spatial_chain(int resolution) const;
  bool admits(int resolution) const;
  // Smallest square input for which every block's spatial output is >= 1.
  int min_resolution() const;

  bool operator==(const ModelConfig& other) const;

  // 4 blocks [16,32,64,128], kernel 3, stride 2, pad 1, embed_dim 64.
  static ModelConfig default_config();
};

// Named backbone tensors plus the classifier weight matrix. Key set and
// shapes are a pure function of the ModelConfig; running stats live in theta
// alongside the trainable tensors.
struct ParameterSet {
  std::map<std::string, Tensor> theta;
  Tensor W;  // [num_classes, embed_dim]
  int num_classes = 0;
  int embed_dim = 0;

  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;

  static bool is_running_stat(const std::string& name);

  // All trainable tensors (theta minus running stats, plus W) in a fixed
  // deterministic order. Returned pointers alias this ParameterSet.
  std::vector<std::pair<std::string, Tensor*>> trainables();
};

// Expected tensor names/shapes for a config, including "classifier.weight".
std::map<std::string, std::vector<int>> expected_shapes(const ModelConfig& config,
                                                        int num_classes);

// He-style init for conv kernels and the projection, unit scale/zero shift
// norms, N(0, 1/embed_dim) classifier. Deterministic in seed.
ParameterSet build(const ModelConfig& config, int num_classes, std::uint64_t seed);

// Block stack -> global average pool -> projection. One code path serves
// any admissible resolution; train mode updates BN running stats in place.
Tensor forward_embed(const ModelConfig& config, ParameterSet& params,
                     const Tensor& images, Mode mode, Graph* tape);

// Read-only eval-mode forward; safe to call concurrently on one ParameterSet.
Tensor forward_embed_eval(const ModelConfig& config, const ParameterSet& params,
                          const Tensor& images, Graph* tape = nullptr);

// forward_embed followed by the bias-free classifier: W * embedding.
Tensor forward_logits(const ModelConfig& config, ParameterSet& params,
                      const Tensor& images, Mode mode, Graph* tape);

// Trainable value count (running stats excluded); no resolution argument
// exists, by construction.
std::int64_t param_count(const ModelConfig& config, int num_classes);

// Deep copy; every tensor bit-identical and independently mutable.
ParameterSet copy_parameters(const ParameterSet& source);

// Binary checkpoint: magic "RDT1", then per tensor name length (u32 LE),
// name, rank (u32), extents (u32 each), raw little-endian f64 values.
void save_parameters(const ParameterSet& params, const std::string& path);
ParameterSet load_parameters(const std::string& path);
// As load_parameters, but rejects checkpoints whose tensor names or shapes
// do not match the config (naming the first offending tensor).
ParameterSet load_parameters_checked(const std::string& path,
                                     const ModelConfig& config,
                                     int expected_num_classes = -1);

// Order-independent content digest (FNV-1a over sorted name/shape/bits);
// used to assert the frozen-teacher property.
std::uint64_t parameters_digest(const ParameterSet& params);

}  // namespace rd
