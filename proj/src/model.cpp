#include "tdg/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace tdg::model {

using ad::Var;

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };
  if (stride != 4) fail("backbone stride is fixed at 4, got " + std::to_string(stride));
  if (image_height <= 0 || image_width <= 0) fail("image size must be positive");
  if (image_height % stride || image_width % stride) fail("image size must be divisible by the stride");
  if (num_slots < 2) fail("num_slots must be >= 2");
  if (slot_iters < 1) fail("slot_iters must be >= 1");
  if (feature_channels <= 0 || slot_dim <= 0 || projection_hidden <= 0) fail("widths must be positive");
  if (decoder_channels.size() != 3) fail("decoder_channels needs exactly 3 widths");
  for (int c : decoder_channels) {
    if (c <= 0) fail("decoder widths must be positive");
  }
}

std::vector<double> SlotSet::row(std::int64_t k) const {
  const auto d = dim();
  return {slots.data().begin() + k * d, slots.data().begin() + (k + 1) * d};
}

SlotSet normalize_slots(const SlotSet& s) {
  SlotSet out = s;
  const auto d = s.dim();
  for (std::int64_t k = 0; k < s.count(); ++k) {
    double ss = 0.0;
    for (std::int64_t j = 0; j < d; ++j) ss += s.slots[k * d + j] * s.slots[k * d + j];
    const double den = std::max(std::sqrt(ss), 1e-8);
    for (std::int64_t j = 0; j < d; ++j) out.slots[k * d + j] = s.slots[k * d + j] / den;
  }
  out.normalized = true;
  return out;
}

template <typename T>
Binding<T>::Binding(ad::Tape<T>& tape, const ParamMap<T>& params, bool requires_grad) : tape_(&tape) {
  for (const auto& [name, value] : params) vars_.emplace(name, tape.leaf(value, requires_grad));
}

template <typename T>
const Var<T>& Binding<T>::operator()(const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw std::out_of_range("no parameter named '" + name + "'");
  return it->second;
}

template <typename T>
ParamMap<T> Binding<T>::grads() const {
  ParamMap<T> out;
  for (const auto& [name, v] : vars_) {
    if (!v.requires_grad()) continue;
    const auto* g = v.grad();
    out.emplace(name, g ? *g : Tensor<T>(v.shape(), T{0}));
  }
  return out;
}

std::string param_group(const std::string& name) {
  return name.substr(0, name.find('.'));
}

namespace {

class Init {
 public:
  explicit Init(std::uint64_t seed) : rng_(seed) {}

  template <typename T>
  Tensor<T> uniform(Shape shape, double bound) {
    Tensor<T> t(std::move(shape));
    for (T& v : t.data()) v = static_cast<T>((2.0 * unit() - 1.0) * bound);
    return t;
  }

 private:
  double unit() { return static_cast<double>(rng_() >> 11) * 0x1.0p-53; }
  std::mt19937_64 rng_;
};

template <typename T>
void add_conv(ParamMap<T>& p, Init& init, const std::string& name, std::int64_t out, std::int64_t in, std::int64_t k) {
  // He-uniform: the convolutions feed ReLUs.
  const double bound = std::sqrt(6.0 / static_cast<double>(in * k * k));
  p.emplace(name + ".weight", init.uniform<T>({out, in, k, k}, bound));
  p.emplace(name + ".bias", Tensor<T>(Shape{out}, T{0}));
}

template <typename T>
void add_linear(ParamMap<T>& p, Init& init, const std::string& name, std::int64_t in, std::int64_t out, bool bias = true) {
  p.emplace(name + ".weight", init.uniform<T>({in, out}, std::sqrt(3.0 / static_cast<double>(in))));
  if (bias) p.emplace(name + ".bias", Tensor<T>(Shape{out}, T{0}));
}

// (x, y, 1-x, 1-y) coordinates of an h x w grid, one row per raster location.
template <typename T>
Tensor<T> position_grid(std::int64_t h, std::int64_t w) {
  Tensor<T> g(Shape{h * w, 4});
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      const T fx = w > 1 ? static_cast<T>(x) / static_cast<T>(w - 1) : T{0};
      const T fy = h > 1 ? static_cast<T>(y) / static_cast<T>(h - 1) : T{0};
      T* row = g.data().data() + (y * w + x) * 4;
      row[0] = fx;
      row[1] = fy;
      row[2] = T{1} - fx;
      row[3] = T{1} - fy;
    }
  }
  return g;
}

template <typename T>
Var<T> linear(const Binding<T>& p, const std::string& name, const Var<T>& x) {
  return ad::add(ad::matmul(x, p(name + ".weight")), p(name + ".bias"));
}

template <typename T>
Var<T> conv(const Binding<T>& p, const std::string& name, const Var<T>& x, int stride, int pad) {
  return ad::conv2d(x, p(name + ".weight"), p(name + ".bias"), stride, pad);
}

// Learned embedding of the coordinate grid: (h*w, width).
template <typename T>
Var<T> position_embedding(const Binding<T>& p, const std::string& name, std::int64_t h, std::int64_t w) {
  const Var<T> grid = p.tape().constant(position_grid<T>(h, w));
  return linear(p, name, grid);
}

}  // namespace

template <typename T>
ParamMap<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Init init(seed);
  ParamMap<T> p;
  const std::int64_t cf = cfg.feature_channels, cs = cfg.slot_dim;
  add_conv(p, init, "backbone.conv1", cf, 3, 5);
  add_conv(p, init, "backbone.conv2", cf, cf, 3);
  add_conv(p, init, "backbone.conv3", cf, cf, 3);
  add_conv(p, init, "backbone.conv4", cf, cf, 3);

  add_linear(p, init, "encoder.pos", 4, cf);
  add_linear(p, init, "encoder.mlp1", cf, cf);
  add_linear(p, init, "encoder.mlp2", cf, cf);
  add_linear(p, init, "encoder.to_k", cf, cs, false);
  add_linear(p, init, "encoder.to_v", cf, cs, false);
  add_linear(p, init, "encoder.to_q", cs, cs, false);
  p.emplace("encoder.queries", init.uniform<T>({cfg.num_slots, cs}, std::sqrt(3.0)));
  const double gb = 1.0 / std::sqrt(static_cast<double>(cs));
  for (const char* g : {"r", "z", "n"}) {
    p.emplace(std::string("encoder.gru.w_i") + g, init.uniform<T>({cs, cs}, gb));
    p.emplace(std::string("encoder.gru.w_h") + g, init.uniform<T>({cs, cs}, gb));
    p.emplace(std::string("encoder.gru.b_i") + g, init.uniform<T>({cs}, gb));
    p.emplace(std::string("encoder.gru.b_h") + g, init.uniform<T>({cs}, gb));
  }
  add_linear(p, init, "encoder.ff1", cs, 2 * cs);
  add_linear(p, init, "encoder.ff2", 2 * cs, cs);

  const auto& dc = cfg.decoder_channels;
  add_linear(p, init, "decoder.pos", 4, cs);
  add_conv(p, init, "decoder.conv1", dc[0], cs, 3);
  add_conv(p, init, "decoder.conv2", dc[1], dc[0], 3);
  add_conv(p, init, "decoder.conv3", dc[2], dc[1], 3);
  add_conv(p, init, "decoder.conv4", 4, dc[2], 3);

  add_conv(p, init, "projection.conv1", cfg.projection_hidden, cf, 1);
  add_conv(p, init, "projection.conv2", cs, cfg.projection_hidden, 1);
  return p;
}

template <typename T>
Var<T> encode_backbone(const Binding<T>& p, const ModelConfig& cfg, const Var<T>& images) {
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != cfg.image_height ||
      images.dim(3) != cfg.image_width) {
    throw ShapeError("encode_backbone: expected (N, 3, " + std::to_string(cfg.image_height) + ", " +
                     std::to_string(cfg.image_width) + ") images, got " + shape_str(images.shape()));
  }
  Var<T> x = ad::relu(conv(p, "backbone.conv1", images, 1, 2));
  x = ad::relu(conv(p, "backbone.conv2", x, 2, 1));
  x = ad::relu(conv(p, "backbone.conv3", x, 2, 1));
  return conv(p, "backbone.conv4", x, 1, 1);
}

template <typename T>
Var<T> initial_slots(const Binding<T>& p, const ModelConfig& cfg, std::int64_t batch) {
  const Var<T> q = ad::reshape(p("encoder.queries"), Shape{1, cfg.num_slots, cfg.slot_dim});
  return ad::broadcast_to(q, Shape{batch, cfg.num_slots, cfg.slot_dim});
}

template <typename T>
SlotAttentionOutput<T> slot_attention(const Binding<T>& p, const ModelConfig& cfg, const Var<T>& features,
                                      const Var<T>& init, int iters) {
  if (features.rank() != 4 || features.dim(1) != cfg.feature_channels) {
    throw ShapeError("slot_attention: features must be (N, " + std::to_string(cfg.feature_channels) +
                     ", h, w), got " + shape_str(features.shape()));
  }
  const std::int64_t n = features.dim(0), h = features.dim(2), w = features.dim(3), len = h * w;
  if (init.rank() != 3 || init.dim(0) != n || init.dim(1) < 1 || init.dim(2) != cfg.slot_dim) {
    throw ShapeError("slot_attention: init must be (N, K >= 1, " + std::to_string(cfg.slot_dim) + "), got " +
                     shape_str(init.shape()));
  }
  if (iters < 1) throw std::invalid_argument("slot_attention: iters must be >= 1");
  const std::int64_t k = init.dim(1), cs = cfg.slot_dim;

  Var<T> tokens = ad::permute(ad::reshape(features, Shape{n, cfg.feature_channels, len}), {0, 2, 1});
  tokens = ad::add(tokens, position_embedding(p, "encoder.pos", h, w));
  tokens = ad::layer_norm(tokens);
  tokens = linear(p, "encoder.mlp2", ad::relu(linear(p, "encoder.mlp1", tokens)));
  tokens = ad::layer_norm(tokens);
  const Var<T> keys = ad::matmul(tokens, p("encoder.to_k.weight"));
  const Var<T> values = ad::matmul(tokens, p("encoder.to_v.weight"));

  const ad::GruWeights<T> gru{p("encoder.gru.w_ir"), p("encoder.gru.w_iz"), p("encoder.gru.w_in"),
                              p("encoder.gru.w_hr"), p("encoder.gru.w_hz"), p("encoder.gru.w_hn"),
                              p("encoder.gru.b_ir"), p("encoder.gru.b_iz"), p("encoder.gru.b_in"),
                              p("encoder.gru.b_hr"), p("encoder.gru.b_hz"), p("encoder.gru.b_hn")};
  const T scale = T{1} / std::sqrt(static_cast<T>(cs));
  Var<T> slots = init;
  Var<T> attn;
  for (int it = 0; it < iters; ++it) {
    if (cfg.bilevel_init && it == iters - 1 && it > 0) {
      // init - sg(init) is exactly zero, so the forward value stays bit-identical.
      slots = ad::add(ad::stop_gradient(slots), ad::sub(init, ad::stop_gradient(init)));
    }
    const Var<T> prev = slots;
    const Var<T> q = ad::matmul(ad::layer_norm(slots), p("encoder.to_q.weight"));
    const Var<T> logits = ad::mul_scalar(ad::matmul(keys, ad::permute(q, {0, 2, 1})), scale);  // (N,L,K)
    attn = ad::softmax(logits, 2);
    const Var<T> shifted = ad::add_scalar(attn, T(1e-8));
    const Var<T> weights = ad::div(shifted, ad::sum(shifted, 1, true));
    const Var<T> updates = ad::matmul(ad::permute(weights, {0, 2, 1}), values);  // (N,K,C_s)
    slots = ad::reshape(ad::gru_cell(ad::reshape(updates, Shape{n * k, cs}), ad::reshape(prev, Shape{n * k, cs}), gru),
                        Shape{n, k, cs});
    slots = ad::add(slots, linear(p, "encoder.ff2", ad::relu(linear(p, "encoder.ff1", ad::layer_norm(slots)))));
  }
  return {slots, ad::permute(attn, {0, 2, 1})};
}

template <typename T>
Decoded<T> decode_slots(const Binding<T>& p, const ModelConfig& cfg, const Var<T>& slots) {
  if (slots.rank() != 3 || slots.dim(2) != cfg.slot_dim) {
    throw ShapeError("decode_slots: slots must be (N, K, " + std::to_string(cfg.slot_dim) + "), got " +
                     shape_str(slots.shape()));
  }
  const std::int64_t n = slots.dim(0), k = slots.dim(1), cs = cfg.slot_dim;
  if (k < 1) throw std::invalid_argument("decode_slots: empty slot set");
  const std::int64_t gh = cfg.grid_height(), gw = cfg.grid_width();
  const std::int64_t hh = cfg.image_height, ww = cfg.image_width;

  // Unit-norm slots are rescaled to unit RMS per entry before broadcasting.
  const Var<T> flat = ad::mul_scalar(ad::reshape(slots, Shape{n * k, cs, 1, 1}), std::sqrt(static_cast<T>(cs)));
  const Var<T> pos = ad::reshape(ad::permute(position_embedding(p, "decoder.pos", gh, gw), {1, 0}), Shape{1, cs, gh, gw});
  Var<T> x = ad::add(ad::broadcast_to(flat, Shape{n * k, cs, gh, gw}), pos);
  x = ad::relu(conv(p, "decoder.conv1", x, 1, 1));
  x = ad::relu(conv(p, "decoder.conv2", ad::upsample_nearest(x, 2), 1, 1));
  x = ad::relu(conv(p, "decoder.conv3", ad::upsample_nearest(x, 2), 1, 1));
  x = conv(p, "decoder.conv4", x, 1, 1);  // (N*K, 4, H, W)
  x = ad::reshape(x, Shape{n, k, 4, hh, ww});
  const Var<T> rgb = ad::slice(x, 2, 0, 3);
  const Var<T> masks = ad::softmax(ad::slice(x, 2, 3, 1), 1);  // (N,K,1,H,W)
  const Var<T> recon = ad::sum(ad::mul(masks, rgb), 1);
  return {recon, ad::reshape(masks, Shape{n, k, hh, ww})};
}

template <typename T>
Var<T> project(const Binding<T>& p, const ModelConfig& cfg, const Var<T>& features) {
  if (features.rank() != 4 || features.dim(1) != cfg.feature_channels) {
    throw ShapeError("project: features must have " + std::to_string(cfg.feature_channels) +
                     " channels on axis 1, got " + shape_str(features.shape()));
  }
  const Var<T> hidden = ad::relu(conv(p, "projection.conv1", features, 1, 0));
  return conv(p, "projection.conv2", hidden, 1, 0);
}

template <typename T>
BottomUp<T> forward_bottom_up(const Binding<T>& p, const ModelConfig& cfg, const Var<T>& images) {
  BottomUp<T> out;
  out.features = encode_backbone(p, cfg, images);
  const auto sa = slot_attention(p, cfg, out.features, initial_slots(p, cfg, images.dim(0)), cfg.slot_iters);
  out.slots = ad::l2_normalize(sa.slots, 2);
  out.attention = sa.attention;
  const auto dec = decode_slots(p, cfg, out.slots);
  out.reconstruction = dec.reconstruction;
  out.masks = dec.masks;
  return out;
}

namespace {

Var<float> single_image(ad::Tape<float>& tape, const ModelConfig& cfg, const Tensor<float>& image) {
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != cfg.image_height || image.dim(2) != cfg.image_width) {
    throw ShapeError("expected a (3, " + std::to_string(cfg.image_height) + ", " + std::to_string(cfg.image_width) +
                     ") image, got " + shape_str(image.shape()));
  }
  return tape.constant(image.reshaped(Shape{1, 3, cfg.image_height, cfg.image_width}));
}

// Drops the leading batch axis of a single-item batch.
Tensor<double> unbatch(const Tensor<float>& t) {
  Shape s(t.shape().begin() + 1, t.shape().end());
  return t.cast<double>().reshaped(std::move(s));
}

}  // namespace

Perception perceive(const SlotModel& model, const Tensor<float>& image) {
  ad::Tape<float> tape;
  const Binding<float> p(tape, model.params, false);
  const auto bu = forward_bottom_up(p, model.config, single_image(tape, model.config, image));
  Perception out;
  out.features = {unbatch(bu.features.value()), model.config.stride};
  out.slots = {unbatch(bu.slots.value()), true};
  out.reconstruction = unbatch(bu.reconstruction.value());
  out.masks = {unbatch(bu.masks.value())};
  out.attention = unbatch(bu.attention.value());
  return out;
}

std::pair<Tensor<double>, MaskStack> decode(const SlotModel& model, const SlotSet& slots) {
  if (slots.slots.rank() != 2 || slots.count() < 1) throw std::invalid_argument("decode: empty slot set");
  ad::Tape<float> tape;
  const Binding<float> p(tape, model.params, false);
  const Var<float> s = tape.constant(slots.slots.cast<float>().reshaped(Shape{1, slots.count(), slots.dim()}));
  const auto dec = decode_slots(p, model.config, s);
  return {unbatch(dec.reconstruction.value()), MaskStack{unbatch(dec.masks.value())}};
}

Tensor<double> project_features(const SlotModel& model, const FeatureGrid& features) {
  ad::Tape<float> tape;
  const Binding<float> p(tape, model.params, false);
  Shape s{1};
  s.insert(s.end(), features.features.shape().begin(), features.features.shape().end());
  const Var<float> f = tape.constant(features.features.cast<float>().reshaped(s));
  return unbatch(project(p, model.config, f).value());
}

FeatureGrid backbone_features(const SlotModel& model, const Tensor<float>& image) {
  ad::Tape<float> tape;
  const Binding<float> p(tape, model.params, false);
  return {unbatch(encode_backbone(p, model.config, single_image(tape, model.config, image)).value()),
          model.config.stride};
}

#define TDG_INSTANTIATE_MODEL(T)                                                                                  \
  template class Binding<T>;                                                                                     \
  template ParamMap<T> init_params<T>(const ModelConfig&, std::uint64_t);                                        \
  template Var<T> encode_backbone(const Binding<T>&, const ModelConfig&, const Var<T>&);                         \
  template Var<T> initial_slots(const Binding<T>&, const ModelConfig&, std::int64_t);                            \
  template SlotAttentionOutput<T> slot_attention(const Binding<T>&, const ModelConfig&, const Var<T>&,           \
                                                 const Var<T>&, int);                                            \
  template Decoded<T> decode_slots(const Binding<T>&, const ModelConfig&, const Var<T>&);                        \
  template Var<T> project(const Binding<T>&, const ModelConfig&, const Var<T>&);                                 \
  template BottomUp<T> forward_bottom_up(const Binding<T>&, const ModelConfig&, const Var<T>&);

TDG_INSTANTIATE_MODEL(float)
TDG_INSTANTIATE_MODEL(double)

}  // namespace tdg::model
