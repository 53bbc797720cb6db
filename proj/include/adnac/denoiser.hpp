#pragma once

// Latent-domain U-Net: stem -> L x [res blocks -> strided down conv] ->
// bottleneck -> L x [transposed up conv -> concat skip -> res blocks] -> out stem.
// Input and output are (B, C_lat, F); F is padded internally to a multiple
// of 2^levels and cropped back.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "adnac/autodiff.hpp"
#include "adnac/error.hpp"
#include "adnac/rng.hpp"

namespace adnac {

struct UNetConfig {
  std::size_t in_channels = 64;  // C_lat
  std::size_t base_channels = 64;
  std::size_t levels = 5;
  std::size_t max_channels = 512;
  std::size_t res_blocks_per_level = 2;
  std::size_t norm_groups = 8;
  double norm_eps = 1e-5;

  std::size_t channels_at(std::size_t level) const {
    std::size_t c = base_channels;
    for (std::size_t i = 0; i < level && c < max_channels; ++i) c *= 2;
    return std::min(c, max_channels);
  }
  std::size_t bottleneck_channels() const { return channels_at(levels); }
  std::size_t time_multiple() const { return std::size_t{1} << levels; }

  void validate() const {
    if (in_channels == 0 || base_channels == 0 || levels == 0 || res_blocks_per_level == 0)
      throw ConfigError("unet: channel counts, levels and res_blocks_per_level must be positive");
    if (levels > 16) throw ConfigError("unet: too many levels");
    if (max_channels < base_channels) throw ConfigError("unet: max_channels below base_channels");
    for (std::size_t l = 0; l <= levels; ++l) {
      if (norm_groups == 0 || channels_at(l) % norm_groups != 0)
        throw ConfigError("unet: norm_groups " + std::to_string(norm_groups) + " does not divide channel count " +
                          std::to_string(channels_at(l)));
    }
  }
};

// Shape bookkeeping captured during a forward pass.
struct UNetTrace {
  std::vector<std::size_t> encoder_channels;  // per level, after its res blocks
  std::vector<std::size_t> down_lengths;      // time length after each down conv
  std::size_t bottleneck_channels = 0;
  std::vector<std::size_t> up_lengths;  // time length after each up conv
  std::size_t padded_len = 0;
};

template <typename T>
struct UNet {
  UNetConfig config;
  ParamStore<T> params;
};

namespace detail {

template <typename T>
void add_conv(ParamStore<T>& ps, Rng& rng, const std::string& name, std::size_t cout, std::size_t cin, std::size_t k,
              bool transposed = false, std::size_t stride = 1) {
  // Kaiming-uniform with negative slope sqrt(5) (bound 1/sqrt(fan_in)), fan_in
  // counting the inputs that feed each output sample
  const double fan_in = transposed ? static_cast<double>(cin * k) / static_cast<double>(stride)
                                   : static_cast<double>(cin * k);
  const double bound = 1.0 / std::sqrt(fan_in);
  Tensor<T> w(transposed ? Shape{cin, cout, k} : Shape{cout, cin, k});
  std::uniform_real_distribution<double> d(-bound, bound);
  for (T& v : w.data) v = static_cast<T>(d(rng));
  ps.add(name + ".w", std::move(w));
  ps.add(name + ".b", Tensor<T>(Shape{cout}));
}

template <typename T>
void add_norm(ParamStore<T>& ps, const std::string& name, std::size_t c) {
  ps.add(name + ".gamma", Tensor<T>(Shape{c}, T(1)));
  ps.add(name + ".beta", Tensor<T>(Shape{c}));
}

template <typename T>
void add_res_block(ParamStore<T>& ps, Rng& rng, const std::string& name, std::size_t cin, std::size_t cout) {
  add_norm(ps, name + ".norm1", cin);
  add_conv(ps, rng, name + ".conv1", cout, cin, 3);
  add_norm(ps, name + ".norm2", cout);
  add_conv(ps, rng, name + ".conv2", cout, cout, 3);
  if (cin != cout) add_conv(ps, rng, name + ".skip", cout, cin, 1);
}

}  // namespace detail

template <typename T>
UNet<T> build_unet(const UNetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  UNet<T> net;
  net.config = cfg;
  Rng rng = make_rng(stable_hash(seed, std::string_view("unet-init")));
  auto& ps = net.params;
  const std::size_t R = cfg.res_blocks_per_level;
  detail::add_conv(ps, rng, "stem", cfg.base_channels, cfg.in_channels, 3);
  std::size_t c = cfg.base_channels;
  for (std::size_t l = 0; l < cfg.levels; ++l) {
    const std::size_t cl = cfg.channels_at(l);
    for (std::size_t r = 0; r < R; ++r) {
      detail::add_res_block(ps, rng, "enc" + std::to_string(l) + ".res" + std::to_string(r), c, cl);
      c = cl;
    }
    detail::add_conv(ps, rng, "enc" + std::to_string(l) + ".down", cl, cl, 4);
  }
  const std::size_t cb = cfg.bottleneck_channels();
  for (std::size_t r = 0; r < R; ++r) {
    detail::add_res_block(ps, rng, "mid.res" + std::to_string(r), c, cb);
    c = cb;
  }
  for (std::size_t l = cfg.levels; l-- > 0;) {
    const std::size_t cl = cfg.channels_at(l);
    detail::add_conv(ps, rng, "dec" + std::to_string(l) + ".up", cl, c, 4, true, 2);
    c = cl;
    for (std::size_t r = 0; r < R; ++r) {
      detail::add_res_block(ps, rng, "dec" + std::to_string(l) + ".res" + std::to_string(r), r == 0 ? 2 * cl : cl, cl);
    }
  }
  detail::add_conv(ps, rng, "out", cfg.in_channels, cfg.base_channels, 3);
  return net;
}

// Pre-activation block: GN -> SiLU -> conv3 -> GN -> SiLU -> conv3, plus an
// identity (or 1x1 conv when channels change) skip path.
template <typename T>
ad::Var<T> residual_block(ad::Var<T> x, ParamStore<T>& ps, const std::string& name, const UNetConfig& cfg) {
  using namespace ad;
  Tape<T>& tp = *x.tape;
  auto p = [&](const std::string& n) { return tp.param(ps.get(name + n)); };
  const std::size_t cin = x.dim(1);
  if (ps.get(name + ".norm1.gamma").value.size() != cin)
    throw ShapeError(name + ": expects " + std::to_string(ps.get(name + ".norm1.gamma").value.size()) +
                     " input channels, got " + std::to_string(cin));
  const std::string saved = tp.scope();
  tp.set_scope(name);
  auto h = silu(group_norm(x, cfg.norm_groups, p(".norm1.gamma"), p(".norm1.beta"), cfg.norm_eps));
  h = conv1d(h, p(".conv1.w"), p(".conv1.b"), 1, 1);
  h = silu(group_norm(h, cfg.norm_groups, p(".norm2.gamma"), p(".norm2.beta"), cfg.norm_eps));
  h = conv1d(h, p(".conv2.w"), p(".conv2.b"), 1, 1);
  auto skip = ps.contains(name + ".skip.w") ? conv1d(x, p(".skip.w"), p(".skip.b")) : x;
  auto out = add(h, skip);
  tp.set_scope(saved);
  return out;
}

// Right zero-pad of the time axis to the next multiple.
template <typename T>
std::pair<ad::Var<T>, std::size_t> pad_latent(ad::Var<T> x, std::size_t multiple = 32) {
  const std::size_t F = x.shape().back();
  if (F == 0) throw ShapeError("pad_latent: empty time axis");
  const std::size_t target = (F + multiple - 1) / multiple * multiple;
  return {target == F ? x : ad::pad_time(x, target - F), F};
}

template <typename T>
ad::Var<T> unet_forward(ad::Var<T> x, UNet<T>& net, UNetTrace* trace = nullptr) {
  using namespace ad;
  const UNetConfig& cfg = net.config;
  auto& ps = net.params;
  Tape<T>& tp = *x.tape;
  if (x.value().rank() != 3 || x.dim(1) != cfg.in_channels)
    throw ShapeError("unet_forward: expected (B," + std::to_string(cfg.in_channels) + ",F), got " +
                     shape_str(x.shape()));
  auto p = [&](const std::string& n) { return tp.param(ps.get(n)); };
  const std::size_t R = cfg.res_blocks_per_level;

  auto [h, F] = pad_latent(x, cfg.time_multiple());
  if (trace) {
    *trace = UNetTrace{};
    trace->padded_len = h.shape().back();
  }
  tp.set_scope("stem");
  h = conv1d(h, p("stem.w"), p("stem.b"), 1, 1);

  std::vector<Var<T>> skips;
  for (std::size_t l = 0; l < cfg.levels; ++l) {
    const std::string lv = "enc" + std::to_string(l);
    for (std::size_t r = 0; r < R; ++r) h = residual_block(h, ps, lv + ".res" + std::to_string(r), cfg);
    skips.push_back(h);
    if (trace) trace->encoder_channels.push_back(h.dim(1));
    tp.set_scope(lv + ".down");
    h = conv1d(h, p(lv + ".down.w"), p(lv + ".down.b"), 2, 1);
    if (trace) trace->down_lengths.push_back(h.shape().back());
  }
  for (std::size_t r = 0; r < R; ++r) h = residual_block(h, ps, "mid.res" + std::to_string(r), cfg);
  if (trace) trace->bottleneck_channels = h.dim(1);
  for (std::size_t l = cfg.levels; l-- > 0;) {
    const std::string lv = "dec" + std::to_string(l);
    tp.set_scope(lv + ".up");
    h = conv_transpose1d(h, p(lv + ".up.w"), p(lv + ".up.b"), 2, 1);
    if (trace) trace->up_lengths.push_back(h.shape().back());
    h = concat_channels(h, skips[l]);
    for (std::size_t r = 0; r < R; ++r) h = residual_block(h, ps, lv + ".res" + std::to_string(r), cfg);
  }
  tp.set_scope("out");
  h = conv1d(h, p("out.w"), p("out.b"), 1, 1);
  tp.set_scope("");
  return h.shape().back() == F ? h : crop_time(h, F);
}

}  // namespace adnac
