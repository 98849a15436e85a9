#include "mora/adapters.hpp"

#include "mora/random.hpp"

namespace mora {

std::string_view to_string(MissingPattern p) {
  switch (p.bits() & 0b11) {
    case 0b11: return "complete";
    case 0b01: return "image";
    case 0b10: return "text";
    default: return "none";
  }
}

std::string_view to_string(Projection p) {
  return p == Projection::query ? "query" : "value";
}

Projection projection_from_string(std::string_view name) {
  if (name == "query") return Projection::query;
  if (name == "value") return Projection::value;
  throw ConfigError("unknown projection '" + std::string(name) + "' (expected query or value)");
}

std::string_view to_string(AdapterKind k) {
  switch (k) {
    case AdapterKind::none: return "none";
    case AdapterKind::lora: return "lora";
    case AdapterKind::mora: return "mora";
  }
  return "none";
}

AdapterKind adapter_kind_from_string(std::string_view name) {
  if (name == "none") return AdapterKind::none;
  if (name == "lora") return AdapterKind::lora;
  if (name == "mora") return AdapterKind::mora;
  throw ConfigError("unknown method '" + std::string(name) + "' (expected mora, lora or none)");
}

namespace {

Tensor gaussian_down_projection(Index k, Index rank, double init_std, std::uint64_t seed) {
  if (rank < 1) throw ConfigError("adapter rank must be at least 1, got " + std::to_string(rank));
  if (k < 1) throw ConfigError("adapter input width must be positive");
  Rng rng(seed);
  Matrix a(rank, k);
  fill_normal(a, rng, init_std);
  return Tensor(std::move(a), true);
}

}  // namespace

LoraAdapter init_lora(Index k, Index d, Index rank, double init_std, std::uint64_t seed) {
  LoraAdapter out;
  out.A = gaussian_down_projection(k, rank, init_std, seed);
  out.B = Tensor::zeros(d, rank, true);
  return out;
}

MoraAdapter init_mora(Index k, Index d, Index rank, double init_std, std::uint64_t seed) {
  MoraAdapter out;
  out.A = gaussian_down_projection(k, rank, init_std, seed);
  out.B_img = Tensor::zeros(d, rank, true);
  out.B_txt = Tensor::zeros(d, rank, true);
  return out;
}

Tensor lora_adaptation(Graph& g, const Tensor& x, const LoraAdapter& adapter) {
  Tensor low = matmul_nt(g, x, adapter.A);
  return matmul_nt(g, low, adapter.B);
}

Tensor mora_adaptation(Graph& g, const Tensor& x, MissingPattern pattern, const MoraAdapter& adapter) {
  if (pattern.empty()) throw ContractError("mora_adaptation: sample has no modality present");
  Tensor low = matmul_nt(g, x, adapter.A);
  Tensor out;
  if (pattern.has(Modality::image)) out = matmul_nt(g, low, adapter.B_img);
  if (pattern.has(Modality::text)) {
    Tensor txt = matmul_nt(g, low, adapter.B_txt);
    out = out.defined() ? add(g, out, txt) : txt;
  }
  return out;
}

Tensor adaptation(Graph& g, const Tensor& x, MissingPattern pattern, const Adapter& adapter) {
  return std::visit(
      [&](const auto& a) -> Tensor {
        using T = std::decay_t<decltype(a)>;
        if constexpr (std::is_same_v<T, LoraAdapter>)
          return lora_adaptation(g, x, a);
        else
          return mora_adaptation(g, x, pattern, a);
      },
      adapter);
}

Tensor adapted_linear_forward(Graph& g, const Tensor& x, const Tensor& W0, const Tensor& bias,
                              MissingPattern pattern, const Adapter& adapter) {
  Tensor base = linear(g, x, W0, bias);
  Tensor delta = adaptation(g, x, pattern, adapter);
  if (delta.cols() != base.cols())
    throw DimensionError("adapter output width " + std::to_string(delta.cols()) +
                         " does not match weight rows " + std::to_string(base.cols()));
  return add(g, base, delta);
}

Matrix merge_for_pattern(const Matrix& W0, const MoraAdapter& adapter, MissingPattern pattern) {
  if (pattern.empty()) throw ContractError("merge_for_pattern: empty pattern");
  if (adapter.B_img.rows() != W0.rows() || adapter.A.cols() != W0.cols())
    throw DimensionError("merge_for_pattern: adapter does not match weight " +
                         shape_string(W0.rows(), W0.cols()));
  Matrix merged = W0;
  if (pattern.has(Modality::image)) merged.noalias() += adapter.B_img.value() * adapter.A.value();
  if (pattern.has(Modality::text)) merged.noalias() += adapter.B_txt.value() * adapter.A.value();
  return merged;
}

Matrix merge_for_pattern(const Matrix& W0, const Adapter& adapter, MissingPattern pattern) {
  if (const auto* mora = std::get_if<MoraAdapter>(&adapter)) return merge_for_pattern(W0, *mora, pattern);
  const auto& lora = std::get<LoraAdapter>(adapter);
  if (pattern.empty()) throw ContractError("merge_for_pattern: empty pattern");
  return W0 + lora.B.value() * lora.A.value();
}

Index adapter_param_count(const Adapter& adapter) {
  return std::visit(
      [](const auto& a) -> Index {
        using T = std::decay_t<decltype(a)>;
        if constexpr (std::is_same_v<T, LoraAdapter>)
          return a.A.size() + a.B.size();
        else
          return a.A.size() + a.B_img.size() + a.B_txt.size();
      },
      adapter);
}

}  // namespace mora
