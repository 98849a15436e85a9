#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <string_view>
#include <variant>

#include "mora/tensor.hpp"

namespace mora {

enum class Modality : std::uint8_t { image = 0, text = 1 };

/// Set of modalities present in a sample. Bit 0 is image, bit 1 is text.
class MissingPattern {
 public:
  constexpr MissingPattern() = default;
  constexpr explicit MissingPattern(std::uint8_t bits) : bits_(bits) {}

  static constexpr MissingPattern complete() { return MissingPattern(0b11); }
  static constexpr MissingPattern image_only() { return MissingPattern(0b01); }
  static constexpr MissingPattern text_only() { return MissingPattern(0b10); }

  constexpr bool has(Modality m) const { return (bits_ >> static_cast<int>(m)) & 1U; }
  constexpr bool empty() const { return (bits_ & 0b11) == 0; }
  constexpr bool is_complete() const { return (bits_ & 0b11) == 0b11; }
  constexpr std::uint8_t bits() const { return bits_; }

  constexpr MissingPattern with(Modality m, bool present) const {
    const auto bit = static_cast<std::uint8_t>(1U << static_cast<int>(m));
    return MissingPattern(present ? (bits_ | bit) : (bits_ & ~bit));
  }

  friend constexpr bool operator==(MissingPattern, MissingPattern) = default;

 private:
  std::uint8_t bits_ = 0;
};

/// "complete", "image", "text" or "none".
std::string_view to_string(MissingPattern p);

enum class Projection { query, value };
std::string_view to_string(Projection p);
Projection projection_from_string(std::string_view name);

enum class AdapterKind { none, lora, mora };
std::string_view to_string(AdapterKind k);
AdapterKind adapter_kind_from_string(std::string_view name);

/// Where adapters go and how they start.
struct AdapterConfig {
  AdapterKind kind = AdapterKind::mora;
  Index rank = 4;
  std::set<int> target_blocks{0};
  std::set<Projection> target_projections{Projection::query, Projection::value};
  double init_std = 0.02;
};

/// Plain low-rank update W0 + B·A.
struct LoraAdapter {
  Tensor A;  // [r×k]
  Tensor B;  // [d×r]

  Index rank() const { return A.rows(); }
};

/// One shared down-projection and one up-projection per modality.
struct MoraAdapter {
  Tensor A;      // [r×k], shared
  Tensor B_img;  // [d×r]
  Tensor B_txt;  // [d×r]

  Index rank() const { return A.rows(); }
};

using Adapter = std::variant<LoraAdapter, MoraAdapter>;

/// A ~ N(0, init_std²) from `seed`, up-projections zero. Throws ConfigError
/// for rank < 1.
LoraAdapter init_lora(Index k, Index d, Index rank, double init_std, std::uint64_t seed);
MoraAdapter init_mora(Index k, Index d, Index rank, double init_std, std::uint64_t seed);

/// x·Aᵀ·Bᵀ for t×k tokens.
Tensor lora_adaptation(Graph& g, const Tensor& x, const LoraAdapter& adapter);

/// Sum of B_m·A·x over the modalities present in `pattern`, applied to every
/// token row of the sample. The image term is always added first.
Tensor mora_adaptation(Graph& g, const Tensor& x, MissingPattern pattern, const MoraAdapter& adapter);

Tensor adaptation(Graph& g, const Tensor& x, MissingPattern pattern, const Adapter& adapter);

/// x·W0ᵀ + bias + adaptation(x). Only adapter tensors are expected to train.
Tensor adapted_linear_forward(Graph& g, const Tensor& x, const Tensor& W0, const Tensor& bias,
                              MissingPattern pattern, const Adapter& adapter);

/// W0 + Σ_{m present} B_m·A as a dense [d×k] weight.
Matrix merge_for_pattern(const Matrix& W0, const MoraAdapter& adapter, MissingPattern pattern);
Matrix merge_for_pattern(const Matrix& W0, const Adapter& adapter, MissingPattern pattern);

/// Trainable values in this adapter.
Index adapter_param_count(const Adapter& adapter);

}  // namespace mora
