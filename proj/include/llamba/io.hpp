#pragma once

#include <map>
#include <string>

#include "llamba/mohawk.hpp"
#include "llamba/model.hpp"
#include "llamba/quant.hpp"

namespace llamba {

// In-memory image of an LMBA file: a key=value header plus named tensors,
// dense or 4-bit quantized. std::map keeps save order (and thus the byte
// output) deterministic. Layout documented byte-for-byte in docs/format.md.
struct ModelBundle {
  std::map<std::string, std::string> header;
  std::map<std::string, Tensor> tensors;
  std::map<std::string, QuantTensor> qtensors;

  bool quantized() const;
};

constexpr std::uint32_t kLmbaVersion = 1;
// The file format fixes the quantization group size so payload sizes are
// derivable from dtype + shape alone.
constexpr std::size_t kLmbaGroupSize = 32;

void save_bundle(const ModelBundle& b, const std::string& path);
ModelBundle load_bundle(const std::string& path);

// header text <-> map ("key=value\n" lines)
std::map<std::string, std::string> parse_kv_text(const std::string& text);
std::string render_kv_text(const std::map<std::string, std::string>& kv);

// --- model / teacher / checkpoint views ------------------------------------

ModelBundle to_bundle(const Model& m);
Model model_from_bundle(const ModelBundle& b);

ModelBundle to_bundle(const Teacher& t);
Teacher teacher_from_bundle(const ModelBundle& b);

struct Checkpoint {
  Model model;
  AdamW opt;
  int stage = 0;
  long next_step = 0;  // first step not yet taken
};

ModelBundle to_bundle(const Checkpoint& c);
Checkpoint checkpoint_from_bundle(const ModelBundle& b);

// Quantize every weight matrix whose inner dimension holds at least one
// full group; embeddings, norms and small vectors stay in float.
ModelBundle quantize_model_bundle(const ModelBundle& b);

// convenience wrappers
void save_model(const Model& m, const std::string& path);
Model load_model(const std::string& path);
void save_teacher(const Teacher& t, const std::string& path);
Teacher load_teacher(const std::string& path);
void save_checkpoint(const Checkpoint& c, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

std::size_t file_size(const std::string& path);

}  // namespace llamba
