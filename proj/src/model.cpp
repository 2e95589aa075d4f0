// SPDX-License-Identifier: Apache-2.0
#include "appledefect/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "appledefect/error.hpp"

namespace appledefect {

namespace fs = std::filesystem;
using nlohmann::json;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMatrix>;
using ConstRowMap = Eigen::Map<const RowMatrix>;

std::string_view to_string(BackboneName n) {
  switch (n) {
    case BackboneName::tiny: return "tiny";
    case BackboneName::mobilenet_v1: return "mobilenet_v1";
    case BackboneName::densenet121: return "densenet121";
    case BackboneName::resnet50: return "resnet50";
    case BackboneName::vgg19: return "vgg19";
  }
  return "?";
}

std::optional<BackboneName> parse_backbone_name(std::string_view s) {
  for (auto n : {BackboneName::tiny, BackboneName::mobilenet_v1, BackboneName::densenet121, BackboneName::resnet50,
                 BackboneName::vgg19}) {
    if (to_string(n) == s) return n;
  }
  return std::nullopt;
}

std::string display_name(BackboneName n) {
  switch (n) {
    case BackboneName::tiny: return "Tiny";
    case BackboneName::mobilenet_v1: return "MobileNetV1";
    case BackboneName::densenet121: return "DenseNet121";
    case BackboneName::resnet50: return "ResNet50";
    case BackboneName::vgg19: return "VGG19";
  }
  return "?";
}

int native_feature_depth(BackboneName n) {
  switch (n) {
    case BackboneName::tiny: return 64;
    case BackboneName::mobilenet_v1: return 1024;
    case BackboneName::densenet121: return 1024;
    case BackboneName::resnet50: return 2048;
    case BackboneName::vgg19: return 512;
  }
  return 0;
}

BackboneSpec default_backbone(BackboneName name, int input_height, int input_width) {
  return {name, name != BackboneName::tiny, input_height, input_width, native_feature_depth(name)};
}

// ---------------------------------------------------------------------------
// Spec serialization and validation

json to_json(const BackboneSpec& s) {
  return {{"name", std::string(to_string(s.name))},
          {"pretrained", s.pretrained},
          {"input_size", {s.input_height, s.input_width}},
          {"feature_depth", s.feature_depth}};
}

json to_json(const ClassifierSpec& s) {
  return {{"mode", s.mode == InputMode::single ? "single" : "multi"},
          {"backbone_a", to_json(s.backbone_a)},
          {"backbone_b", s.backbone_b ? to_json(*s.backbone_b) : json(nullptr)},
          {"share_weights", s.share_weights},
          {"head",
           {{"pooling", "global_average"},
            {"hidden_sizes", s.head.hidden_sizes},
            {"dropout_rate", s.head.dropout_rate},
            {"num_classes", s.head.num_classes}}}};
}

namespace {

BackboneSpec backbone_from_json(const json& j) {
  const auto name = parse_backbone_name(j.at("name").get<std::string>());
  if (!name) throw Error(ErrorCode::SpecMismatch, "unknown backbone " + j.at("name").get<std::string>());
  BackboneSpec s = default_backbone(*name);
  s.pretrained = j.value("pretrained", s.pretrained);
  if (j.contains("input_size")) {
    s.input_height = j["input_size"].at(0).get<int>();
    s.input_width = j["input_size"].at(1).get<int>();
  }
  s.feature_depth = j.value("feature_depth", s.feature_depth);
  return s;
}

void validate_backbone(const BackboneSpec& s) {
  if (s.name == BackboneName::tiny && s.pretrained) {
    throw Error(ErrorCode::SpecMismatch, "tiny backbone has no pretrained weights");
  }
  if (s.name != BackboneName::tiny && !s.pretrained) {
    throw Error(ErrorCode::SpecMismatch,
                std::string(to_string(s.name)) + " is only available as a pretrained adapter");
  }
  if (s.feature_depth != native_feature_depth(s.name)) {
    throw Error(ErrorCode::SpecMismatch, std::string(to_string(s.name)) + " produces depth " +
                                             std::to_string(native_feature_depth(s.name)));
  }
  if (s.input_height < 1 || s.input_width < 1) throw Error(ErrorCode::SpecMismatch, "input size must be positive");
}

}  // namespace

ClassifierSpec classifier_spec_from_json(const json& j) {
  try {
    ClassifierSpec s;
    const auto mode = j.value("mode", std::string("single"));
    if (mode != "single" && mode != "multi") throw Error(ErrorCode::SpecMismatch, "mode must be single or multi");
    s.mode = mode == "single" ? InputMode::single : InputMode::multi;
    s.backbone_a = backbone_from_json(j.at("backbone_a"));
    if (j.contains("backbone_b") && !j["backbone_b"].is_null()) s.backbone_b = backbone_from_json(j["backbone_b"]);
    s.share_weights = j.value("share_weights", false);
    if (j.contains("head")) {
      const auto& h = j["head"];
      if (h.value("pooling", std::string("global_average")) != "global_average") {
        throw Error(ErrorCode::SpecMismatch, "only global_average pooling is supported");
      }
      s.head.hidden_sizes = h.value("hidden_sizes", s.head.hidden_sizes);
      s.head.dropout_rate = h.value("dropout_rate", s.head.dropout_rate);
      s.head.num_classes = h.value("num_classes", s.head.num_classes);
    }
    return s;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::SpecMismatch, std::string("classifier spec: ") + e.what());
  }
}

void validate(const ClassifierSpec& s) {
  validate_backbone(s.backbone_a);
  if (s.head.hidden_sizes.size() != 2 || s.head.hidden_sizes[0] < 1 || s.head.hidden_sizes[1] < 1) {
    throw Error(ErrorCode::SpecMismatch, "head needs exactly two positive hidden sizes");
  }
  if (!(s.head.dropout_rate >= 0.0 && s.head.dropout_rate < 1.0)) {
    throw Error(ErrorCode::SpecMismatch, "dropout_rate must lie in [0, 1)");
  }
  if (s.head.num_classes < 2) throw Error(ErrorCode::SpecMismatch, "num_classes must be >= 2");
  if (s.mode == InputMode::multi) {
    if (!s.share_weights && !s.backbone_b) {
      throw Error(ErrorCode::SpecMismatch, "multi-input needs backbone_b unless weights are shared");
    }
    if (!s.share_weights) validate_backbone(*s.backbone_b);
  }
}

// ---------------------------------------------------------------------------
// Backbone

namespace {

std::pair<int, int> conv_out_hw(int h, int w, const ConvLayerSpec& l) {
  return {(h + 2 * l.pad - l.kernel) / l.stride + 1, (w + 2 * l.pad - l.kernel) / l.stride + 1};
}

std::vector<ConvLayerSpec> tiny_layers() {
  return {{3, 16, 5, 2, 2}, {16, 32, 5, 2, 2}, {32, 64, 5, 2, 2}, {64, 64, 5, 2, 2}};
}

RowMatrix im2col(const ImageF& in, const ConvLayerSpec& l, int oh, int ow) {
  const int k = l.kernel, c = in.channels;
  RowMatrix cols = RowMatrix::Zero(static_cast<Eigen::Index>(oh) * ow, static_cast<Eigen::Index>(k) * k * c);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      double* row = cols.row(static_cast<Eigen::Index>(oy) * ow + ox).data();
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * l.stride - l.pad + ky;
        if (iy < 0 || iy >= in.height) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * l.stride - l.pad + kx;
          if (ix < 0 || ix >= in.width) continue;
          const double* src = &in.data[in.index(ix, iy)];
          std::copy(src, src + c, row + (ky * k + kx) * c);
        }
      }
    }
  }
  return cols;
}

void col2im_add(const RowMatrix& dcols, const ConvLayerSpec& l, int oh, int ow, ImageF& grad_in) {
  const int k = l.kernel, c = grad_in.channels;
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const double* row = dcols.row(static_cast<Eigen::Index>(oy) * ow + ox).data();
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * l.stride - l.pad + ky;
        if (iy < 0 || iy >= grad_in.height) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * l.stride - l.pad + kx;
          if (ix < 0 || ix >= grad_in.width) continue;
          double* dst = &grad_in.data[grad_in.index(ix, iy)];
          const double* src = row + (ky * k + kx) * c;
          for (int ch = 0; ch < c; ++ch) dst[ch] += src[ch];
        }
      }
    }
  }
}

Param make_param(std::string name, std::size_t n) {
  return Param{std::move(name), std::vector<double>(n, 0.0), std::vector<double>(n, 0.0), true};
}

void he_init(Param& p, int fan_in, Rng& rng, double gain = 2.0) {
  const double std = std::sqrt(gain / fan_in);
  for (auto& v : p.value) v = rng.normal() * std;
}

}  // namespace

Backbone::Backbone(BackboneSpec spec, std::vector<ConvLayerSpec> layers, const std::string& prefix,
                   std::uint64_t seed)
    : spec_(spec), layers_(std::move(layers)) {
  Rng rng(seed);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    const auto fan_in = l.kernel * l.kernel * l.in_channels;
    auto w = make_param(prefix + ".conv" + std::to_string(i) + ".weight",
                        static_cast<std::size_t>(fan_in) * l.out_channels);
    he_init(w, fan_in, rng);
    params_.push_back(std::move(w));
    params_.push_back(make_param(prefix + ".conv" + std::to_string(i) + ".bias", l.out_channels));
  }
}

std::pair<int, int> Backbone::output_hw() const {
  int h = spec_.input_height, w = spec_.input_width;
  for (const auto& l : layers_) std::tie(h, w) = conv_out_hw(h, w, l);
  return {h, w};
}

ImageF Backbone::normalize(const ImageF& input) const {
  ImageF out = input;
  switch (spec_.name) {
    case BackboneName::tiny:
    case BackboneName::mobilenet_v1:
      for (auto& v : out.data) v = v * 2.0 - 1.0;
      break;
    case BackboneName::vgg19:
    case BackboneName::resnet50: {
      // Caffe convention: BGR order, 0-255 scale, per-channel mean removed.
      static constexpr double mean_bgr[3] = {103.939, 116.779, 123.68};
      for (std::size_t p = 0; p < out.data.size(); p += 3) {
        for (int c = 0; c < 3; ++c) out.data[p + c] = 255.0 * input.data[p + 2 - c] - mean_bgr[c];
      }
      break;
    }
    case BackboneName::densenet121: {
      static constexpr double mean[3] = {0.485, 0.456, 0.406};
      static constexpr double stddev[3] = {0.229, 0.224, 0.225};
      for (std::size_t p = 0; p < out.data.size(); p += 3) {
        for (int c = 0; c < 3; ++c) out.data[p + c] = (out.data[p + c] - mean[c]) / stddev[c];
      }
      break;
    }
  }
  return out;
}

ImageF Backbone::forward(const ImageF& input, Cache* cache) const {
  ImageF x = normalize(input);
  if (cache) {
    cache->activations.clear();
    cache->cols.clear();
    cache->activations.push_back(x);
  }
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    const auto [oh, ow] = conv_out_hw(x.height, x.width, l);
    RowMatrix cols = im2col(x, l, oh, ow);
    const ConstRowMap w(params_[2 * i].value.data(), cols.cols(), l.out_channels);
    const Eigen::Map<const Eigen::RowVectorXd> b(params_[2 * i + 1].value.data(), l.out_channels);
    ImageF y(ow, oh, l.out_channels);
    RowMap out(y.data.data(), static_cast<Eigen::Index>(oh) * ow, l.out_channels);
    out.noalias() = cols * w;
    out.rowwise() += b;
    out = out.cwiseMax(0.0);
    if (cache) {
      cache->cols.push_back(std::move(cols));
      cache->activations.push_back(y);
    }
    x = std::move(y);
  }
  return x;
}

void Backbone::backward(const ImageF& grad_output, const Cache& cache) {
  ImageF grad = grad_output;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    const auto& l = layers_[i];
    const ImageF& out = cache.activations[i + 1];
    const auto p = static_cast<Eigen::Index>(out.width) * out.height;
    RowMatrix g = ConstRowMap(grad.data.data(), p, l.out_channels);
    const ConstRowMap act(out.data.data(), p, l.out_channels);
    g = (act.array() > 0.0).select(g, 0.0);

    const RowMatrix& cols = cache.cols[i];
    RowMap dw(params_[2 * i].grad.data(), cols.cols(), l.out_channels);
    Eigen::Map<Eigen::RowVectorXd> db(params_[2 * i + 1].grad.data(), l.out_channels);
    dw.noalias() += cols.transpose() * g;
    db += g.colwise().sum();
    if (i == 0) break;

    const ConstRowMap w(params_[2 * i].value.data(), cols.cols(), l.out_channels);
    const RowMatrix dcols = g * w.transpose();
    const ImageF& in = cache.activations[i];
    ImageF grad_in(in.width, in.height, in.channels);
    col2im_add(dcols, l, out.height, out.width, grad_in);
    grad = std::move(grad_in);
  }
}

Backbone build_backbone(const BackboneSpec& spec, std::uint64_t seed, const std::string& prefix,
                        std::optional<fs::path> weight_cache) {
  validate_backbone(spec);
  if (spec.name == BackboneName::tiny) return Backbone(spec, tiny_layers(), prefix, seed);

  if (!weight_cache) {
    if (const char* env = std::getenv(kWeightCacheEnv)) weight_cache = fs::path(env);
  }
  const std::string asset_name = std::string(to_string(spec.name)) + ".adw";
  std::error_code ec;
  if (!weight_cache || !fs::is_regular_file(*weight_cache / asset_name, ec)) {
    throw Error(ErrorCode::PretrainedWeightsUnavailable,
                asset_name + " not found (set " + kWeightCacheEnv + " to the weight cache directory)");
  }
  const Archive a = load_archive(*weight_cache / asset_name);
  std::vector<ConvLayerSpec> layers;
  try {
    for (const auto& jl : a.meta.at("layers")) {
      layers.push_back({jl.at("in").get<int>(), jl.at("out").get<int>(), jl.at("kernel").get<int>(),
                        jl.at("stride").get<int>(), jl.at("pad").get<int>()});
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::CorruptCheckpoint, asset_name + ": " + e.what());
  }
  if (layers.empty() || layers.front().in_channels != 3 || layers.back().out_channels != spec.feature_depth) {
    throw Error(ErrorCode::SpecMismatch, asset_name + " does not map 3 channels to depth " +
                                             std::to_string(spec.feature_depth));
  }
  Backbone b(spec, layers, prefix, seed);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    for (int part = 0; part < 2; ++part) {
      const auto key = "conv" + std::to_string(i) + (part == 0 ? ".weight" : ".bias");
      const auto* values = a.find(key);
      auto& param = b.params()[2 * i + part];
      if (!values || values->size() != param.value.size()) {
        throw Error(ErrorCode::CorruptCheckpoint, asset_name + ": bad array " + key);
      }
      param.value = *values;
    }
  }
  return b;
}

void export_backbone_asset(const Backbone& b, const fs::path& path) {
  Archive a;
  a.meta["architecture"] = std::string(to_string(b.spec().name));
  a.meta["layers"] = json::array();
  for (const auto& l : b.layers()) {
    a.meta["layers"].push_back(
        {{"in", l.in_channels}, {"out", l.out_channels}, {"kernel", l.kernel}, {"stride", l.stride}, {"pad", l.pad}});
  }
  for (std::size_t i = 0; i < b.layers().size(); ++i) {
    a.arrays.emplace_back("conv" + std::to_string(i) + ".weight", b.params()[2 * i].value);
    a.arrays.emplace_back("conv" + std::to_string(i) + ".bias", b.params()[2 * i + 1].value);
  }
  save_archive(path, a);
}

ImageF concat_depth(const ImageF& a, const ImageF& b) {
  if (a.width != b.width || a.height != b.height) {
    throw Error(ErrorCode::BranchShapeMismatch, "feature maps differ in spatial size");
  }
  ImageF out(a.width, a.height, a.channels + b.channels);
  for (int y = 0; y < a.height; ++y) {
    for (int x = 0; x < a.width; ++x) {
      double* dst = &out.data[out.index(x, y)];
      const double* pa = &a.data[a.index(x, y)];
      const double* pb = &b.data[b.index(x, y)];
      std::copy(pa, pa + a.channels, dst);
      std::copy(pb, pb + b.channels, dst + a.channels);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Head

DenseHead::DenseHead(const HeadSpec& spec, int in_features, std::uint64_t seed)
    : spec_(spec), in_features_(in_features) {
  Rng rng(seed);
  const std::vector<int> sizes = {in_features, spec.hidden_sizes[0], spec.hidden_sizes[1], spec.num_classes};
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    auto w = make_param("head.dense" + std::to_string(i) + ".weight",
                        static_cast<std::size_t>(sizes[i]) * sizes[i + 1]);
    const bool output_layer = i + 2 == sizes.size();
    he_init(w, sizes[i], rng, output_layer ? 1.0 : 2.0);
    params_.push_back(std::move(w));
    params_.push_back(make_param("head.dense" + std::to_string(i) + ".bias", sizes[i + 1]));
  }
}

Eigen::VectorXd DenseHead::logits(const Eigen::VectorXd& pooled, RunMode mode, Rng* dropout, Cache* cache) const {
  Eigen::VectorXd x = pooled;
  if (cache) {
    cache->pooled = pooled;
    cache->hidden.clear();
    cache->keep.clear();
  }
  const std::size_t layers = params_.size() / 2;
  for (std::size_t i = 0; i < layers; ++i) {
    const auto& w = params_[2 * i];
    const auto& b = params_[2 * i + 1];
    const auto out_dim = static_cast<Eigen::Index>(b.value.size());
    const ConstRowMap wm(w.value.data(), x.size(), out_dim);
    Eigen::VectorXd y = wm.transpose() * x + Eigen::Map<const Eigen::VectorXd>(b.value.data(), out_dim);
    if (i + 1 == layers) {
      x = std::move(y);
      break;
    }
    y = y.cwiseMax(0.0);
    Eigen::VectorXd keep = Eigen::VectorXd::Ones(out_dim);
    if (mode == RunMode::train && spec_.dropout_rate > 0.0) {
      const double scale = 1.0 / (1.0 - spec_.dropout_rate);
      for (Eigen::Index k = 0; k < out_dim; ++k) keep(k) = dropout->uniform() < spec_.dropout_rate ? 0.0 : scale;
    }
    if (cache) {
      cache->hidden.push_back(y);
      cache->keep.push_back(keep);
    }
    x = y.cwiseProduct(keep);
  }
  if (cache) cache->logits = x;
  return x;
}

Eigen::VectorXd DenseHead::backward(const Eigen::VectorXd& grad_logits, const Cache& cache) {
  const std::size_t layers = params_.size() / 2;
  Eigen::VectorXd g = grad_logits;
  for (std::size_t i = layers; i-- > 0;) {
    // Input to dense layer i: pooled for i == 0, else the dropped-out hidden activation.
    const Eigen::VectorXd input = i == 0 ? cache.pooled : Eigen::VectorXd(cache.hidden[i - 1].cwiseProduct(cache.keep[i - 1]));
    auto& w = params_[2 * i];
    auto& b = params_[2 * i + 1];
    const auto out_dim = static_cast<Eigen::Index>(b.value.size());
    RowMap dw(w.grad.data(), input.size(), out_dim);
    dw.noalias() += input * g.transpose();
    Eigen::Map<Eigen::VectorXd>(b.grad.data(), out_dim) += g;
    const ConstRowMap wm(w.value.data(), input.size(), out_dim);
    Eigen::VectorXd gin = wm * g;
    if (i > 0) {
      gin = gin.cwiseProduct(cache.keep[i - 1]);
      gin = (cache.hidden[i - 1].array() > 0.0).select(gin, 0.0);
    }
    g = std::move(gin);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Classifier

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
  const double m = logits.maxCoeff();
  Eigen::VectorXd e = (logits.array() - m).exp();
  return e / e.sum();
}

namespace {

double cross_entropy(const Eigen::VectorXd& logits, int label) {
  const double m = logits.maxCoeff();
  return m + std::log((logits.array() - m).exp().sum()) - logits(label);
}

Eigen::VectorXd global_average_pool(const ImageF& f) {
  Eigen::VectorXd pooled = Eigen::VectorXd::Zero(f.channels);
  const auto p = static_cast<Eigen::Index>(f.width) * f.height;
  pooled = ConstRowMap(f.data.data(), p, f.channels).colwise().sum().transpose();
  return pooled / static_cast<double>(p);
}

}  // namespace

const Backbone& Classifier::branch_for(std::size_t input_index) const {
  return branches_[std::min(input_index, branches_.size() - 1)];
}

void Classifier::check_input(const ClassifierInput& input) const {
  const std::size_t expected = spec_.mode == InputMode::single ? 1 : 2;
  if (input.size() != expected) {
    throw Error(ErrorCode::ShapeMismatch,
                "expected " + std::to_string(expected) + " input images, got " + std::to_string(input.size()));
  }
  for (std::size_t i = 0; i < input.size(); ++i) {
    const auto& s = branch_for(i).spec();
    if (input[i].height != s.input_height || input[i].width != s.input_width || input[i].channels != 3) {
      throw Error(ErrorCode::ShapeMismatch, "input " + std::to_string(i) + " is " + std::to_string(input[i].height) +
                                                "x" + std::to_string(input[i].width) + "x" +
                                                std::to_string(input[i].channels) + ", expected " +
                                                std::to_string(s.input_height) + "x" +
                                                std::to_string(s.input_width) + "x3");
    }
  }
}

Eigen::VectorXd Classifier::sample_logits(const ClassifierInput& input, RunMode mode, Rng* dropout,
                                          std::vector<Backbone::Cache>* branch_caches, std::vector<ImageF>* features,
                                          DenseHead::Cache* head_cache) const {
  check_input(input);
  std::vector<ImageF> local;
  auto& feats = features ? *features : local;
  feats.clear();
  if (branch_caches) branch_caches->assign(input.size(), {});
  for (std::size_t i = 0; i < input.size(); ++i) {
    feats.push_back(branch_for(i).forward(input[i], branch_caches ? &(*branch_caches)[i] : nullptr));
  }
  const ImageF fused = feats.size() == 1 ? feats[0] : concat_depth(feats[0], feats[1]);
  return head_.logits(global_average_pool(fused), mode, dropout, head_cache);
}

ImageF Classifier::fused_features(const ClassifierInput& input) const {
  check_input(input);
  if (input.size() == 1) return branch_for(0).forward(input[0]);
  return concat_depth(branch_for(0).forward(input[0]), branch_for(1).forward(input[1]));
}

Eigen::MatrixXd Classifier::forward(const std::vector<ClassifierInput>& batch, RunMode mode,
                                    std::uint64_t dropout_seed) const {
  Eigen::MatrixXd probs(static_cast<Eigen::Index>(batch.size()), spec_.head.num_classes);
  Rng dropout(dropout_seed);
  for (std::size_t n = 0; n < batch.size(); ++n) {
    probs.row(static_cast<Eigen::Index>(n)) =
        softmax(sample_logits(batch[n], mode, &dropout, nullptr, nullptr, nullptr)).transpose();
  }
  return probs;
}

double Classifier::loss(const std::vector<ClassifierInput>& batch, const std::vector<int>& labels, RunMode mode,
                        std::uint64_t dropout_seed) const {
  if (batch.size() != labels.size()) throw Error(ErrorCode::LengthMismatch, "batch and labels differ in length");
  if (batch.empty()) throw Error(ErrorCode::EmptyDataset, "empty batch");
  Rng dropout(dropout_seed);
  double total = 0.0;
  for (std::size_t n = 0; n < batch.size(); ++n) {
    if (labels[n] < 0 || labels[n] >= spec_.head.num_classes) {
      throw Error(ErrorCode::LabelOutOfRange, "label " + std::to_string(labels[n]));
    }
    total += cross_entropy(sample_logits(batch[n], mode, &dropout, nullptr, nullptr, nullptr), labels[n]);
  }
  return total / static_cast<double>(batch.size());
}

double Classifier::loss_and_gradients(const std::vector<ClassifierInput>& batch, const std::vector<int>& labels,
                                      RunMode mode, std::uint64_t dropout_seed, bool include_backbones) {
  if (batch.size() != labels.size()) throw Error(ErrorCode::LengthMismatch, "batch and labels differ in length");
  if (batch.empty()) throw Error(ErrorCode::EmptyDataset, "empty batch");
  for (auto* p : parameters()) std::fill(p->grad.begin(), p->grad.end(), 0.0);

  const double inv_n = 1.0 / static_cast<double>(batch.size());
  Rng dropout(dropout_seed);
  double total = 0.0;
  std::vector<Backbone::Cache> caches;
  std::vector<ImageF> feats;
  DenseHead::Cache head_cache;
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const int label = labels[n];
    if (label < 0 || label >= spec_.head.num_classes) {
      throw Error(ErrorCode::LabelOutOfRange, "label " + std::to_string(label));
    }
    const Eigen::VectorXd z = sample_logits(batch[n], mode, &dropout, include_backbones ? &caches : nullptr, &feats,
                                            &head_cache);
    total += cross_entropy(z, label);
    Eigen::VectorXd dz = softmax(z);
    dz(label) -= 1.0;
    dz *= inv_n;
    const Eigen::VectorXd dpooled = head_.backward(dz, head_cache);
    if (!include_backbones) continue;

    // Undo the pooling and the depth concat, then feed each branch.
    Eigen::Index offset = 0;
    for (std::size_t i = 0; i < feats.size(); ++i) {
      const ImageF& f = feats[i];
      const double spread = 1.0 / (static_cast<double>(f.width) * f.height);
      ImageF g(f.width, f.height, f.channels);
      for (std::size_t p = 0; p < g.data.size(); p += static_cast<std::size_t>(f.channels)) {
        for (int c = 0; c < f.channels; ++c) g.data[p + c] = dpooled(offset + c) * spread;
      }
      offset += f.channels;
      const_cast<Backbone&>(branch_for(i)).backward(g, caches[i]);
    }
  }
  return total * inv_n;
}

std::vector<Param*> Classifier::parameters() {
  std::vector<Param*> out;
  for (auto& b : branches_)
    for (auto& p : b.params()) out.push_back(&p);
  for (auto& p : head_.params()) out.push_back(&p);
  return out;
}

std::vector<const Param*> Classifier::parameters() const {
  std::vector<const Param*> out;
  for (const auto& b : branches_)
    for (const auto& p : b.params()) out.push_back(&p);
  for (const auto& p : head_.params()) out.push_back(&p);
  return out;
}

std::vector<Param*> Classifier::head_parameters() {
  std::vector<Param*> out;
  for (auto& p : head_.params()) out.push_back(&p);
  return out;
}

std::size_t Classifier::head_parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : head_.params()) n += p.value.size();
  return n;
}

std::size_t Classifier::branch_parameter_count() const {
  std::size_t n = 0;
  for (const auto& b : branches_)
    for (const auto& p : b.params()) n += p.value.size();
  return n;
}

void Classifier::set_backbone_trainable(bool trainable) {
  for (auto& b : branches_)
    for (auto& p : b.params()) p.trainable = trainable;
}

Archive Classifier::to_archive() const {
  Archive a;
  a.meta["format"] = "appledefect-classifier";
  a.meta["spec"] = to_json(spec_);
  json layers = json::object();
  for (std::size_t i = 0; i < branches_.size(); ++i) {
    json jl = json::array();
    for (const auto& l : branches_[i].layers()) {
      jl.push_back(
          {{"in", l.in_channels}, {"out", l.out_channels}, {"kernel", l.kernel}, {"stride", l.stride}, {"pad", l.pad}});
    }
    layers[i == 0 ? "branch_a" : "branch_b"] = jl;
  }
  a.meta["layers"] = layers;
  for (const auto* p : parameters()) a.arrays.emplace_back(p->name, p->value);
  return a;
}

void Classifier::save_weights(const fs::path& path) const { save_archive(path, to_archive()); }

namespace {

std::vector<ConvLayerSpec> layers_from_json(const json& j) {
  std::vector<ConvLayerSpec> layers;
  for (const auto& jl : j) {
    layers.push_back({jl.at("in").get<int>(), jl.at("out").get<int>(), jl.at("kernel").get<int>(),
                      jl.at("stride").get<int>(), jl.at("pad").get<int>()});
  }
  return layers;
}

}  // namespace

namespace detail {

Classifier assemble_classifier(const ClassifierSpec& spec, std::vector<Backbone> branches, std::uint64_t head_seed) {
  int depth = branches.at(0).spec().feature_depth;
  if (spec.mode == InputMode::multi) {
    if (spec.share_weights) {
      depth *= 2;
    } else {
      const auto& a = branches.at(0).spec();
      const auto& b = branches.at(1).spec();
      if (a.input_height != b.input_height || a.input_width != b.input_width) {
        throw Error(ErrorCode::BranchShapeMismatch, "branch input sizes differ");
      }
      if (branches[0].output_hw() != branches[1].output_hw()) {
        throw Error(ErrorCode::BranchShapeMismatch, "branch feature maps differ in spatial size");
      }
      depth += b.feature_depth;
    }
  }
  DenseHead head(spec.head, depth, head_seed);
  // Pretrained adapters act as frozen feature extractors by default.
  for (auto& b : branches) {
    const bool frozen = b.spec().pretrained;
    for (auto& p : b.params()) p.trainable = !frozen;
  }
  return Classifier(spec, std::move(branches), std::move(head));
}

}  // namespace detail

Classifier build_classifier(const ClassifierSpec& spec, std::uint64_t seed, std::optional<fs::path> weight_cache) {
  validate(spec);
  std::vector<Backbone> branches;
  branches.push_back(build_backbone(spec.backbone_a, derive_seed(seed, {"branch_a"}), "branch_a", weight_cache));
  if (spec.mode == InputMode::multi && !spec.share_weights) {
    const auto& b = *spec.backbone_b;
    if (b.input_height != spec.backbone_a.input_height || b.input_width != spec.backbone_a.input_width) {
      throw Error(ErrorCode::BranchShapeMismatch, "branch input sizes differ");
    }
    branches.push_back(build_backbone(b, derive_seed(seed, {"branch_b"}), "branch_b", weight_cache));
  }
  return detail::assemble_classifier(spec, std::move(branches), derive_seed(seed, {"head"}));
}

Classifier build_single_input(const ClassifierSpec& spec, std::uint64_t seed, std::optional<fs::path> weight_cache) {
  if (spec.mode != InputMode::single) throw Error(ErrorCode::SpecMismatch, "spec is not single-input");
  return build_classifier(spec, seed, std::move(weight_cache));
}

Classifier build_multi_input(const ClassifierSpec& spec, std::uint64_t seed, std::optional<fs::path> weight_cache) {
  if (spec.mode != InputMode::multi) throw Error(ErrorCode::SpecMismatch, "spec is not multi-input");
  return build_classifier(spec, seed, std::move(weight_cache));
}

void assign_weights(Classifier& c, const Archive& a) {
  if (!a.meta.contains("spec")) throw Error(ErrorCode::CorruptCheckpoint, "archive has no classifier spec");
  ClassifierSpec stored;
  try {
    stored = classifier_spec_from_json(a.meta["spec"]);
  } catch (const Error& e) {
    throw Error(ErrorCode::CorruptCheckpoint, e.what());
  }
  if (!(stored == c.spec())) throw Error(ErrorCode::SpecMismatch, "checkpoint was saved for a different spec");
  for (auto* p : c.parameters()) {
    const auto* values = a.find(p->name);
    if (!values || values->size() != p->value.size()) {
      throw Error(ErrorCode::CorruptCheckpoint, "missing or misshaped array " + p->name);
    }
    p->value = *values;
  }
}

Classifier load_weights(const ClassifierSpec& spec, const fs::path& path, std::optional<fs::path> /*weight_cache*/) {
  const Archive a = load_archive(path);
  if (!a.meta.contains("spec")) throw Error(ErrorCode::CorruptCheckpoint, "archive has no classifier spec");
  if (!(classifier_spec_from_json(a.meta["spec"]) == spec)) {
    throw Error(ErrorCode::SpecMismatch, "checkpoint was saved for a different spec");
  }
  validate(spec);
  // Branch layouts come from the checkpoint itself, so loading never needs the weight cache.
  std::vector<Backbone> branches;
  try {
    const auto& layers = a.meta.at("layers");
    branches.emplace_back(spec.backbone_a, layers_from_json(layers.at("branch_a")), "branch_a", 0);
    if (spec.mode == InputMode::multi && !spec.share_weights) {
      branches.emplace_back(*spec.backbone_b, layers_from_json(layers.at("branch_b")), "branch_b", 0);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::CorruptCheckpoint, e.what());
  }
  Classifier c = detail::assemble_classifier(spec, std::move(branches), 0);
  assign_weights(c, a);
  return c;
}

}  // namespace appledefect
