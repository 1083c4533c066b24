#pragma once

// Encoder-decoder assembly over the set operators: configuration and its
// validation, parameter storage and seeded initialization, eager and taped
// forward passes, adaptive-moment training steps with per-sample worker
// parallelism, and checkpoint round-tripping.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <exception>
#include <fstream>
#include <span>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "displace/errors.hpp"
#include "displace/geometry.hpp"
#include "displace/losses.hpp"
#include "displace/operators.hpp"
#include "displace/random.hpp"
#include "displace/tensor.hpp"

namespace displace::model {

// ---- architecture description ----

struct FeatureExtractionLayer {
  std::size_t s = 0;
  std::size_t d_out = 0;
};
struct NeighborPoolingLayer {
  std::size_t tau = 0;
};
struct MaxPoolLayer {};
struct UpSamplingLayer {
  std::size_t s = 0;
  std::size_t n_up = 0;
  std::size_t d_out = 0;
};
using LayerDesc =
    std::variant<FeatureExtractionLayer, NeighborPoolingLayer, MaxPoolLayer, UpSamplingLayer>;

struct ArchitectureConfig {
  std::vector<LayerDesc> layers;
  std::size_t input_count = 2048;
  std::size_t knn_k = 16; // 0 = exact candidate mode
  double alpha = 1.0;
  double beta = 1e-3;
  std::size_t num_classes = 0; // 0 = coordinates only

  std::size_t point_dim() const { return 3 + num_classes; }

  /// Product of decoder replication factors = output point count.
  std::size_t output_count() const {
    std::size_t n = 1;
    for (const auto& l : layers)
      if (const auto* up = std::get_if<UpSamplingLayer>(&l)) n *= up->n_up;
    return n;
  }

  /// Throws ConfigError (naming the offending layer) on a broken sequence;
  /// returns non-fatal warnings such as floor-mode pooling.
  std::vector<std::string> validate() const {
    auto fail = [](std::size_t i, const std::string& what) {
      throw ConfigError("architecture layer " + std::to_string(i) + ": " + what);
    };
    if (layers.empty()) throw ConfigError("architecture: no layers configured");
    if (input_count == 0) throw ConfigError("architecture: input count must be positive");
    if (beta <= 0) throw ConfigError("architecture: beta must be positive");

    std::vector<std::string> warnings;
    std::size_t count = input_count, dim = 3;
    bool seen_feature = false, seen_maxpool = false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      if (const auto* fe = std::get_if<FeatureExtractionLayer>(&l)) {
        if (seen_maxpool) fail(i, "feature extraction cannot appear in the decoder");
        if (fe->s == 0 || fe->d_out == 0) fail(i, "s and d_out must be positive");
        dim = fe->d_out;
        seen_feature = true;
      } else if (const auto* np = std::get_if<NeighborPoolingLayer>(&l)) {
        if (!seen_feature) fail(i, "pooling before any feature extraction");
        if (seen_maxpool) fail(i, "neighbor pooling cannot appear in the decoder");
        if (i == 0 || !std::holds_alternative<FeatureExtractionLayer>(layers[i - 1]))
          fail(i, "neighbor pooling must directly follow a feature extraction");
        if (np->tau == 0) fail(i, "tau must be >= 1");
        if (count < np->tau)
          fail(i, "tau " + std::to_string(np->tau) + " exceeds the " + std::to_string(count) +
                      " available vectors");
        if (count % np->tau != 0)
          warnings.push_back("layer " + std::to_string(i) + ": pooling " + std::to_string(count) +
                             " vectors by tau " + std::to_string(np->tau) +
                             " floors to " + std::to_string(count / np->tau));
        count /= np->tau;
      } else if (std::holds_alternative<MaxPoolLayer>(l)) {
        if (!seen_feature) fail(i, "pooling before any feature extraction");
        if (seen_maxpool) fail(i, "second max-pool");
        seen_maxpool = true;
        count = 1;
      } else {
        const auto& up = std::get<UpSamplingLayer>(l);
        if (!seen_maxpool) fail(i, "up-sampling before the latent max-pool");
        if (up.s == 0 || up.n_up == 0 || up.d_out == 0)
          fail(i, "s, n_up, d_out must be positive");
        count *= up.n_up;
        dim = up.d_out;
      }
    }
    if (!seen_maxpool) throw ConfigError("architecture: missing the latent max-pool");
    if (!std::holds_alternative<UpSamplingLayer>(layers.back()))
      throw ConfigError("architecture: decoder must end in an up-sampling layer");
    if (dim != point_dim())
      throw ConfigError("architecture: final layer emits " + std::to_string(dim) +
                        " channels, expected " + std::to_string(point_dim()) +
                        (num_classes ? " (3 coordinates + class logits)" : " coordinates"));
    return warnings;
  }

  /// The published direct architecture: 2048 points in, 16384 out.
  static ArchitectureConfig paper() {
    ArchitectureConfig c;
    c.input_count = 2048;
    c.layers = {
        FeatureExtractionLayer{10, 16}, NeighborPoolingLayer{8},
        FeatureExtractionLayer{10, 64}, NeighborPoolingLayer{4},
        FeatureExtractionLayer{10, 64}, NeighborPoolingLayer{4},
        FeatureExtractionLayer{10, 64}, MaxPoolLayer{},
        UpSamplingLayer{5, 2, 256},     UpSamplingLayer{10, 8, 64},
        UpSamplingLayer{10, 4, 64},     UpSamplingLayer{10, 4, 32},
        UpSamplingLayer{10, 8, 3},      UpSamplingLayer{10, 1, 3},
        UpSamplingLayer{10, 8, 3},
    };
    return c;
  }

  /// Laptop-scale configuration: 256 points in, 1024 out. The wide two-layer
  /// decoder (32 x 32) trains far faster than a deep stack of narrow
  /// replications at this scale while keeping the same total fan-out.
  static ArchitectureConfig desk(std::size_t num_classes = 0) {
    ArchitectureConfig c;
    c.input_count = 256;
    c.knn_k = 4;
    c.num_classes = num_classes;
    c.layers = {
        FeatureExtractionLayer{4, 8},  NeighborPoolingLayer{4},
        FeatureExtractionLayer{4, 16}, NeighborPoolingLayer{4},
        FeatureExtractionLayer{4, 16}, NeighborPoolingLayer{4},
        FeatureExtractionLayer{4, 16}, MaxPoolLayer{},
        UpSamplingLayer{4, 32, 64},    UpSamplingLayer{4, 32, 3 + num_classes},
    };
    return c;
  }
};

inline nlohmann::json to_json(const ArchitectureConfig& c) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : c.layers) {
    if (const auto* fe = std::get_if<FeatureExtractionLayer>(&l))
      layers.push_back({{"type", "feature_extraction"}, {"s", fe->s}, {"d_out", fe->d_out}});
    else if (const auto* np = std::get_if<NeighborPoolingLayer>(&l))
      layers.push_back({{"type", "neighbor_pooling"}, {"tau", np->tau}});
    else if (std::holds_alternative<MaxPoolLayer>(l))
      layers.push_back({{"type", "max_pool"}});
    else {
      const auto& up = std::get<UpSamplingLayer>(l);
      layers.push_back(
          {{"type", "up_sampling"}, {"s", up.s}, {"n_up", up.n_up}, {"d_out", up.d_out}});
    }
  }
  return nlohmann::json{{"input_count", c.input_count}, {"knn_k", c.knn_k},
                        {"alpha", c.alpha},             {"beta", c.beta},
                        {"num_classes", c.num_classes}, {"layers", std::move(layers)}};
}

inline ArchitectureConfig config_from_json(const nlohmann::json& j) {
  ArchitectureConfig c;
  try {
    c.input_count = j.at("input_count").get<std::size_t>();
    c.knn_k = j.at("knn_k").get<std::size_t>();
    c.alpha = j.at("alpha").get<double>();
    c.beta = j.at("beta").get<double>();
    c.num_classes = j.value("num_classes", std::size_t{0});
    for (const auto& l : j.at("layers")) {
      const std::string type = l.at("type").get<std::string>();
      if (type == "feature_extraction")
        c.layers.push_back(FeatureExtractionLayer{l.at("s").get<std::size_t>(),
                                                  l.at("d_out").get<std::size_t>()});
      else if (type == "neighbor_pooling")
        c.layers.push_back(NeighborPoolingLayer{l.at("tau").get<std::size_t>()});
      else if (type == "max_pool")
        c.layers.push_back(MaxPoolLayer{});
      else if (type == "up_sampling")
        c.layers.push_back(UpSamplingLayer{l.at("s").get<std::size_t>(),
                                           l.at("n_up").get<std::size_t>(),
                                           l.at("d_out").get<std::size_t>()});
      else
        throw ConfigError("unknown layer type '" + type + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("architecture json: ") + e.what());
  }
  return c;
}

// ---- parameters ----

struct ParamEntry {
  std::string name;
  ad::Shape shape;
  std::vector<double> value;
  std::vector<double> m, v; // first/second moment accumulators
};

struct ParamStore {
  std::vector<ParamEntry> entries;

  ParamEntry& add(std::string name, ad::Shape shape) {
    ParamEntry e;
    e.name = std::move(name);
    e.shape = std::move(shape);
    const std::size_t n = ad::numel(e.shape);
    e.value.assign(n, 0.0);
    e.m.assign(n, 0.0);
    e.v.assign(n, 0.0);
    entries.push_back(std::move(e));
    return entries.back();
  }

  ParamEntry* find(const std::string& name) {
    for (auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }

  std::size_t total_scalars() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.value.size();
    return n;
  }
};

struct Optimizer {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t iteration = 0;
};

// ---- training interface types ----

struct LossWeights {
  double out_to_gt = 1.0;
  double gt_to_out = 1.0;
  double order = 0.0;
  double semantic = 0.0;
};

struct TrainSample {
  Cloud partial;           // network input
  Cloud complete;          // ground truth
  std::vector<int> labels; // per-complete-point class ids; empty when unlabeled
};

struct LossBreakdown {
  double out_to_gt = 0;
  double gt_to_out = 0;
  std::optional<double> order;    // absent when weight 0
  std::optional<double> semantic; // absent when weight 0
  double gamma = 0;               // semantic coefficient of the last sample
  double total = 0;               // weighted objective actually stepped

  LossBreakdown& operator+=(const LossBreakdown& o) {
    out_to_gt += o.out_to_gt;
    gt_to_out += o.gt_to_out;
    if (o.order) order = order.value_or(0.0) + *o.order;
    if (o.semantic) semantic = semantic.value_or(0.0) + *o.semantic;
    gamma = o.gamma;
    total += o.total;
    return *this;
  }
};

struct ForwardResult {
  Cloud points;
  std::vector<double> class_probs; // row-major count × num_classes; empty without head
};

// ---- the model ----

class Model {
public:
  Model(ArchitectureConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    rng_ = make_rng(seed);
    init_params();
  }

  const ArchitectureConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  Optimizer& optimizer() { return opt_; }
  const Optimizer& optimizer() const { return opt_; }
  Rng& rng() { return rng_; }

  /// Deterministic non-recording forward pass.
  ForwardResult forward(const Cloud& input) const {
    auto leaves = bind_params(nullptr);
    auto out = run_network(nullptr, input, leaves);
    ForwardResult r;
    r.points = unflatten(out.coords.values());
    if (config_.num_classes > 0) r.class_probs = out.probs.values();
    return r;
  }

  /// One adaptive-moment update over the batch. Per-sample passes run on
  /// independent tapes (optionally on worker threads); gradients are merged
  /// in sample order, so the result is independent of the worker count.
  LossBreakdown train_step(std::span<const TrainSample> batch, const LossWeights& weights,
                           std::size_t workers = 1) {
    if (batch.empty()) throw ContractError("train_step: batch is empty");
    if (weights.semantic != 0 && config_.num_classes == 0)
      throw ConfigError("train_step: semantic weight set but the model has no class head");

    std::vector<SampleResultRaw> results(batch.size());
    std::vector<std::exception_ptr> faults(std::max<std::size_t>(workers, 1));

    auto run_range = [&](std::size_t worker) {
      try {
        for (std::size_t i = worker; i < batch.size(); i += std::max<std::size_t>(workers, 1))
          results[i] = sample_pass(batch[i], weights);
      } catch (...) {
        faults[worker] = std::current_exception();
      }
    };
    if (workers <= 1) {
      run_range(0);
    } else {
      std::vector<std::thread> pool;
      for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run_range, w);
      for (auto& t : pool) t.join();
    }
    for (auto& f : faults)
      if (f) std::rethrow_exception(f);

    // Ordered merge: sum sample gradients in batch order.
    std::vector<std::vector<double>> grads(params_.entries.size());
    for (std::size_t p = 0; p < params_.entries.size(); ++p)
      grads[p].assign(params_.entries[p].value.size(), 0.0);
    LossBreakdown breakdown;
    for (auto& r : results) {
      breakdown += r.breakdown;
      for (std::size_t p = 0; p < grads.size(); ++p)
        for (std::size_t i = 0; i < grads[p].size(); ++i) grads[p][i] += r.grads[p][i];
    }

    apply_update(grads);
    return breakdown;
  }

  // ---- checkpoint I/O ----

  static constexpr char kMagic[8] = {'D', 'I', 'S', 'P', 'C', 'K', 'P', 'T'};
  static constexpr std::uint32_t kVersion = 1;

  void save_checkpoint(const std::string& path) const {
    std::string buf;
    buf.append(kMagic, sizeof kMagic);
    append_u32(buf, kVersion);
    const std::string cfg = to_json(config_).dump();
    append_u64(buf, cfg.size());
    buf += cfg;
    append_u64(buf, opt_.iteration);
    std::ostringstream rng_text;
    rng_text << rng_;
    append_u64(buf, rng_text.str().size());
    buf += rng_text.str();
    append_u64(buf, params_.entries.size());
    for (const auto& e : params_.entries) {
      append_u64(buf, e.name.size());
      buf += e.name;
      append_u64(buf, e.shape.size());
      for (std::size_t d : e.shape) append_u64(buf, d);
      for (const auto* arr : {&e.value, &e.m, &e.v})
        for (double x : *arr) append_f64(buf, x);
    }
    append_u64(buf, fnv1a(buf));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("checkpoint: cannot open '" + path + "' for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("checkpoint: write to '" + path + "' failed");
  }

  static Model load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checkpoint: cannot open '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (buf.size() < sizeof kMagic + 4 + 8)
      throw IoError("checkpoint: file too short to be valid");
    const std::uint64_t stored = read_u64(buf, buf.size() - 8);
    std::string body = buf.substr(0, buf.size() - 8);
    if (fnv1a(body) != stored)
      throw IoError("checkpoint: checksum mismatch — file is corrupt or truncated");

    std::size_t off = 0;
    auto need = [&](std::size_t n) {
      if (off + n > body.size()) throw IoError("checkpoint: unexpected end of data");
    };
    need(sizeof kMagic);
    if (std::memcmp(body.data(), kMagic, sizeof kMagic) != 0)
      throw IoError("checkpoint: bad magic bytes — not a checkpoint file");
    off += sizeof kMagic;
    need(4);
    const std::uint32_t version = read_u32(body, off);
    off += 4;
    if (version != kVersion)
      throw IoError("checkpoint: format version " + std::to_string(version) +
                    " is not supported by this build (supports " + std::to_string(kVersion) +
                    "); re-export the model with a matching build");

    auto take_u64 = [&]() {
      need(8);
      const std::uint64_t v = read_u64(body, off);
      off += 8;
      return v;
    };
    auto take_str = [&](std::uint64_t n) {
      need(n);
      std::string s = body.substr(off, n);
      off += n;
      return s;
    };

    const std::string cfg_text = take_str(take_u64());
    nlohmann::json cfg_json;
    try {
      cfg_json = nlohmann::json::parse(cfg_text);
    } catch (const nlohmann::json::exception& e) {
      throw IoError(std::string("checkpoint: config block is not valid json: ") + e.what());
    }
    Model model(config_from_json(cfg_json), 0);
    model.opt_.iteration = take_u64();
    std::istringstream rng_in(take_str(take_u64()));
    rng_in >> model.rng_;
    if (!rng_in) throw IoError("checkpoint: malformed random-state block");

    const std::uint64_t n_params = take_u64();
    if (n_params != model.params_.entries.size())
      throw IoError("checkpoint: parameter count does not match the embedded architecture");
    for (std::uint64_t p = 0; p < n_params; ++p) {
      auto& e = model.params_.entries[p];
      const std::string name = take_str(take_u64());
      if (name != e.name)
        throw IoError("checkpoint: parameter '" + name + "' where '" + e.name + "' expected");
      const std::uint64_t rank = take_u64();
      ad::Shape shape(rank);
      for (auto& d : shape) d = take_u64();
      if (shape != e.shape) throw IoError("checkpoint: shape mismatch for '" + name + "'");
      for (auto* arr : {&e.value, &e.m, &e.v})
        for (auto& x : *arr) {
          need(8);
          x = read_f64(body, off);
          off += 8;
        }
    }
    if (off != body.size()) throw IoError("checkpoint: trailing bytes after parameter payload");
    return model;
  }

private:
  ArchitectureConfig config_;
  ParamStore params_;
  Optimizer opt_;
  Rng rng_;
  // Per layer, the param-entry indices of its banks (3 entries per bank).
  std::vector<std::vector<std::size_t>> layer_entries_;

  // ---- parameter construction ----

  void init_params() {
    std::size_t dim = 3;
    for (std::size_t i = 0; i < config_.layers.size(); ++i) {
      const auto& l = config_.layers[i];
      std::vector<std::size_t> ids;
      if (const auto* fe = std::get_if<FeatureExtractionLayer>(&l)) {
        add_bank_params("layer" + std::to_string(i), fe->s, dim, fe->d_out, ids);
        dim = fe->d_out;
      } else if (const auto* up = std::get_if<UpSamplingLayer>(&l)) {
        for (std::size_t u = 0; u < up->n_up; ++u)
          add_bank_params("layer" + std::to_string(i) + ".u" + std::to_string(u), up->s, dim,
                          up->d_out, ids);
        dim = up->d_out;
      }
      layer_entries_.push_back(std::move(ids));
    }
  }

  void add_bank_params(const std::string& prefix, std::size_t s, std::size_t d_in,
                       std::size_t d_out, std::vector<std::size_t>& ids) {
    const double rho_bound = std::sqrt(3.0 / static_cast<double>(d_in));
    auto& delta = params_.add(prefix + ".delta", {d_out, s, d_in});
    for (auto& x : delta.value) x = uniform(rng_, -0.1, 0.1);
    ids.push_back(params_.entries.size() - 1);
    auto& sigma = params_.add(prefix + ".sigma", {d_out, s});
    for (auto& x : sigma.value) x = uniform(rng_, -0.5, 0.5);
    ids.push_back(params_.entries.size() - 1);
    auto& rho = params_.add(prefix + ".rho", {d_out, d_in});
    for (auto& x : rho.value) x = uniform(rng_, -rho_bound, rho_bound);
    ids.push_back(params_.entries.size() - 1);
  }

  // Leaf tensors for every parameter: tape variables when recording, detached
  // constants otherwise.
  std::vector<ad::Tensor> bind_params(ad::Tape* tape) const {
    std::vector<ad::Tensor> leaves;
    leaves.reserve(params_.entries.size());
    for (const auto& e : params_.entries)
      leaves.push_back(tape ? tape->variable(e.shape, e.value, true)
                            : ad::make_constant(e.shape, e.value));
    return leaves;
  }

  op::DisplacementBank bank_at(const std::vector<ad::Tensor>& leaves, std::size_t first,
                               std::size_t s, std::size_t d_in, std::size_t d_out) const {
    op::DisplacementBank b;
    b.s = s;
    b.d_in = d_in;
    b.d_out = d_out;
    b.deltas = leaves[first];
    b.sigmas = leaves[first + 1];
    b.rhos = leaves[first + 2];
    b.alpha = config_.alpha;
    b.beta = config_.beta;
    return b;
  }

  struct NetworkOut {
    ad::Tensor coords; // (n_out, 3)
    ad::Tensor logits; // (n_out, num_classes) when head enabled
    ad::Tensor probs;
  };

  NetworkOut run_network(ad::Tape* tape, const Cloud& input,
                         const std::vector<ad::Tensor>& leaves) const {
    if (input.size() != config_.input_count)
      throw ContractError("forward: input holds " + std::to_string(input.size()) +
                          " points, config expects " + std::to_string(config_.input_count));

    const ad::Shape in_shape{input.size(), std::size_t{3}};
    ad::Tensor in = tape ? tape->variable(in_shape, flatten(input), false)
                         : ad::make_constant(in_shape, flatten(input));
    op::FeatureSet cur = op::FeatureSet::from(in);

    std::size_t dim = 3;
    std::optional<op::Extraction> last_extraction;
    for (std::size_t i = 0; i < config_.layers.size(); ++i) {
      const auto& l = config_.layers[i];
      if (const auto* fe = std::get_if<FeatureExtractionLayer>(&l)) {
        auto ex = op::feature_extraction(
            cur, bank_at(leaves, layer_entries_[i][0], fe->s, dim, fe->d_out), config_.knn_k);
        cur = ex.features;
        last_extraction = std::move(ex);
        dim = fe->d_out;
      } else if (const auto* np = std::get_if<NeighborPoolingLayer>(&l)) {
        auto acts = op::activations(*last_extraction);
        cur = op::neighbor_pooling(cur, acts, np->tau);
      } else if (std::holds_alternative<MaxPoolLayer>(l)) {
        cur = op::latent_max_pool(cur);
      } else {
        const auto& up = std::get<UpSamplingLayer>(l);
        op::UpBank banks;
        for (std::size_t u = 0; u < up.n_up; ++u)
          banks.banks.push_back(
              bank_at(leaves, layer_entries_[i][3 * u], up.s, dim, up.d_out));
        cur = op::upsampling(cur, banks, config_.knn_k);
        dim = up.d_out;
      }
    }

    NetworkOut out;
    if (config_.num_classes == 0) {
      out.coords = cur.vectors;
    } else {
      std::vector<std::int64_t> coord_cols{0, 1, 2}, label_cols;
      for (std::size_t c = 0; c < config_.num_classes; ++c)
        label_cols.push_back(static_cast<std::int64_t>(3 + c));
      out.coords = ad::gather(cur.vectors, coord_cols, 1);
      out.logits = ad::gather(cur.vectors, label_cols, 1);
      out.probs = loss::label_probabilities(out.logits);
    }
    return out;
  }

  // ---- one sample's forward/backward ----

  struct SampleResultRaw {
    LossBreakdown breakdown;
    std::vector<std::vector<double>> grads;
  };

  SampleResultRaw sample_pass(const TrainSample& sample, const LossWeights& weights) const {
    if (sample.complete.empty()) throw ContractError("train_step: sample has no ground truth");
    if (weights.semantic != 0 && sample.labels.size() != sample.complete.size())
      throw ConfigError("train_step: semantic weight set but the sample has no labels");

    ad::Tape tape;
    auto leaves = bind_params(&tape);
    NetworkOut out = run_network(&tape, sample.partial, leaves);

    const ad::Shape gt_shape{sample.complete.size(), std::size_t{3}};
    ad::Tensor gt = tape.variable(gt_shape, flatten(sample.complete), false);

    auto check_term = [](const char* name, double v) {
      if (!std::isfinite(v))
        throw NumericFault(std::string("train_step: ") + name + " loss is non-finite");
    };

    LossBreakdown bd;
    auto fwd = loss::directed_closest_loss(out.coords, gt);
    auto bwd = loss::directed_closest_loss(gt, out.coords);
    bd.out_to_gt = fwd.value.value();
    bd.gt_to_out = bwd.value.value();
    check_term("out_to_gt", bd.out_to_gt);
    check_term("gt_to_out", bd.gt_to_out);

    ad::Tensor total = ad::add(ad::mul_scalar(fwd.value, weights.out_to_gt),
                               ad::mul_scalar(bwd.value, weights.gt_to_out));
    if (weights.order != 0) {
      ad::Tensor in_const = ad::make_constant({sample.partial.size(), std::size_t{3}},
                                              flatten(sample.partial));
      ad::Tensor order = loss::order_loss(in_const, out.coords);
      bd.order = order.value();
      check_term("order", *bd.order);
      total = ad::add(total, ad::mul_scalar(order, weights.order));
    }
    if (weights.semantic != 0) {
      loss::LabeledSet pred{out.coords, out.probs};
      loss::LabeledSet truth{gt, one_hot(sample.labels)};
      auto sem = loss::semantic_loss(pred, truth, fwd.corr, bd.out_to_gt, bd.gt_to_out);
      bd.semantic = sem.value.value();
      bd.gamma = sem.gamma;
      check_term("semantic", *bd.semantic);
      total = ad::add(total, ad::mul_scalar(sem.value, weights.semantic));
    }
    bd.total = total.value();
    check_term("total", bd.total);

    auto gmap = tape.backward(total);
    SampleResultRaw r;
    r.breakdown = bd;
    r.grads.reserve(leaves.size());
    for (const auto& leaf : leaves) r.grads.push_back(gmap.at(leaf));
    return r;
  }

  ad::Tensor one_hot(const std::vector<int>& labels) const {
    const std::size_t classes = config_.num_classes;
    std::vector<double> rows(labels.size() * classes, 0.0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes)
        throw ContractError("train_step: label " + std::to_string(labels[i]) +
                            " outside the configured " + std::to_string(classes) + " classes");
      rows[i * classes + static_cast<std::size_t>(labels[i])] = 1.0;
    }
    return ad::make_constant({labels.size(), classes}, std::move(rows));
  }

  void apply_update(const std::vector<std::vector<double>>& grads) {
    opt_.iteration += 1;
    const double t = static_cast<double>(opt_.iteration);
    const double c1 = 1.0 - std::pow(opt_.beta1, t);
    const double c2 = 1.0 - std::pow(opt_.beta2, t);
    for (std::size_t p = 0; p < params_.entries.size(); ++p) {
      auto& e = params_.entries[p];
      const auto& g = grads[p];
      for (std::size_t i = 0; i < e.value.size(); ++i) {
        e.m[i] = opt_.beta1 * e.m[i] + (1.0 - opt_.beta1) * g[i];
        e.v[i] = opt_.beta2 * e.v[i] + (1.0 - opt_.beta2) * g[i] * g[i];
        const double mhat = e.m[i] / c1;
        const double vhat = e.v[i] / c2;
        e.value[i] -= opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps);
        if (!std::isfinite(e.value[i]))
          throw NumericFault("train_step: parameter '" + e.name + "' became non-finite");
      }
    }
  }

  // ---- little-endian encoding ----

  static void append_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  static void append_u64(std::string& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  static void append_f64(std::string& buf, double x) {
    std::uint64_t bits;
    std::memcpy(&bits, &x, 8);
    append_u64(buf, bits);
  }
  static std::uint32_t read_u32(const std::string& buf, std::size_t off) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
    return v;
  }
  static std::uint64_t read_u64(const std::string& buf, std::size_t off) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
    return v;
  }
  static double read_f64(const std::string& buf, std::size_t off) {
    const std::uint64_t bits = read_u64(buf, off);
    double x;
    std::memcpy(&x, &bits, 8);
    return x;
  }
  static std::uint64_t fnv1a(const std::string& data) {
    std::uint64_t h = 14695981039346656037ull;
    for (char c : data) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ull;
    }
    return h;
  }
};

} // namespace displace::model
