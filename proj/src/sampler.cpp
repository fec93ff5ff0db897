#include "controlstyle/sampler.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "controlstyle/text.hpp"

namespace controlstyle {

torch::Tensor initial_noise(uint64_t seed, int64_t channels, int64_t size) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return torch::randn({channels, size, size}, gen, torch::kFloat32);
}

torch::Tensor sample_latents(FrozenModels& m, ModulationNetwork* style_net, std::span<const std::string> captions,
                             const torch::Tensor& styles, std::span<const uint64_t> seeds, double style_weight,
                             std::span<ControlBranch> extra) {
  const auto B = static_cast<int64_t>(captions.size());
  if (B == 0 || seeds.size() != captions.size()) throw std::invalid_argument("sample: captions/seeds mismatch");
  const bool styled = styles.defined();
  if (styled && !style_net) throw std::invalid_argument("sample: style image given without a style checkpoint");
  if (styled && styles.size(0) != B) throw std::invalid_argument("sample: styles/captions batch mismatch");
  if (!std::isfinite(style_weight) || style_weight < 0) throw std::invalid_argument("sample: weights must be >= 0");

  torch::NoGradGuard g;
  const auto& sched = m.schedule;
  const int64_t C = m.unet->config().latent_channels;
  const int64_t s = m.ae->config().latent_size();

  auto text = m.text->forward(tokenize_captions(captions));
  std::vector<at::Generator> gens;
  std::vector<torch::Tensor> z_rows;
  for (auto seed : seeds) {
    gens.push_back(at::make_generator<at::CPUGeneratorImpl>(seed));
    z_rows.push_back(torch::randn({C, s, s}, gens.back(), torch::kFloat32));
  }
  auto z = torch::stack(z_rows);

  std::vector<ControlBranch> branches;
  const bool fused = !extra.empty() || (styled && style_weight != 1.0);
  if (fused) {
    if (styled) branches.push_back({*style_net, styles, style_weight});
    for (auto& b : extra) {
      auto cond = b.condition.dim() == 3 ? b.condition.unsqueeze(0).expand({B, -1, -1, -1}) : b.condition;
      branches.push_back({b.net, cond, b.weight});
    }
  }

  for (int t = sched.steps(); t >= 1; --t) {
    auto tt = timesteps(B, t);
    torch::Tensor eps;
    if (fused)
      eps = fuse_controls(branches, z, tt, text, m.unet);
    else if (styled)
      eps = modulated_forward(m.unet, *style_net, z, tt, text, styles);
    else
      eps = m.unet->forward(z, tt, text).eps;
    torch::Tensor noise;
    if (t > 1) {
      std::vector<torch::Tensor> rows;
      for (auto& gen : gens) rows.push_back(torch::randn({C, s, s}, gen, torch::kFloat32));
      noise = torch::stack(rows);
    } else {
      noise = torch::zeros_like(z);
    }
    z = reverse_step(z, t, eps, noise, sched);
  }
  return z;
}

torch::Tensor sample(const SampleRequest& req, FrozenModels& m, ModulationNetwork* style_net) {
  if (req.steps != 0 && req.steps != m.schedule.steps())
    throw std::invalid_argument("sample: steps must equal T = " + std::to_string(m.schedule.steps()));
  for (const auto& b : req.extra)
    if (!std::isfinite(b.weight) || b.weight < 0) throw std::invalid_argument("sample: weights must be >= 0");
  std::vector<std::string> captions{req.caption};
  std::vector<uint64_t> seeds{req.seed};
  auto extra = req.extra;
  auto styles = req.style.defined() ? req.style.unsqueeze(0) : torch::Tensor();
  auto z = sample_latents(m, style_net, captions, styles, seeds, req.style_weight, extra);
  torch::NoGradGuard g;
  return m.ae->decode(z)[0];
}

namespace {

torch::Tensor batched(const torch::Tensor& x) { return x.dim() == 3 ? x.unsqueeze(0) : x; }

}  // namespace

double style_distance(Autoencoder& ae, const torch::Tensor& image, const torch::Tensor& style_image,
                      const RegConfig& cfg) {
  torch::NoGradGuard g;
  return style_reg(ae, ae->encode(batched(image)), batched(style_image), cfg).item<double>();
}

double structure_score(Autoencoder& ae, const torch::Tensor& image, const torch::Tensor& reference,
                       const RegConfig& cfg) {
  torch::NoGradGuard g;
  return content_reg(ae, ae->encode(batched(image)), ae->encode(batched(reference)), cfg).item<double>();
}

nlohmann::json EvalRecord::to_json() const {
  return {{"id", id},
          {"pair", pair},
          {"caption", caption},
          {"style_id", style_id},
          {"seed", seed},
          {"style_distance", style_distance},
          {"base_style_distance", base_style_distance},
          {"structure_score", structure_score},
          {"shuffled_structure_score", shuffled_structure}};
}

MeanCI mean_ci(std::span<const double> values) {
  MeanCI r;
  if (values.empty()) return r;
  const double n = static_cast<double>(values.size());
  r.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() > 1) {
    double ss = 0;
    for (double v : values) ss += (v - r.mean) * (v - r.mean);
    r.half_width = 1.96 * std::sqrt(ss / (n - 1) / n);
  }
  return r;
}

nlohmann::json EvalReport::summary() const {
  return {{"summary", true},
          {"records", records.size()},
          {"style_distance", style_distance.to_json()},
          {"base_style_distance", base_style_distance.to_json()},
          {"structure_score", structure_score.to_json()},
          {"shuffled_structure_score", shuffled_structure.to_json()}};
}

void EvalReport::write_jsonl(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& r : records) out << r.to_json().dump() << '\n';
  out << summary().dump() << '\n';
}

EvalReport evaluate(FrozenModels& m, ModulationNetwork& style_net, std::span<const EvalPair> pairs,
                    const EvalOptions& opts) {
  if (pairs.empty()) throw std::invalid_argument("evaluate: empty eval set");
  if (opts.seeds_per_pair < 1 || opts.batch < 1) throw std::invalid_argument("evaluate: bad seeds_per_pair or batch");

  EvalReport report;
  for (std::size_t p = 0; p < pairs.size(); ++p)
    for (int k = 0; k < opts.seeds_per_pair; ++k) {
      EvalRecord r;
      r.id = static_cast<int>(report.records.size());
      r.pair = static_cast<int>(p);
      r.caption = pairs[p].caption;
      r.style_id = pairs[p].style_id;
      r.seed = opts.seed + 1000003ULL * p + static_cast<uint64_t>(k);
      report.records.push_back(r);
    }

  const auto n = static_cast<int64_t>(report.records.size());
  std::vector<torch::Tensor> stylized(static_cast<std::size_t>(n)), base(static_cast<std::size_t>(n));
  for (int64_t i = 0; i < n; i += opts.batch) {
    const int64_t end = std::min(n, i + opts.batch);
    std::vector<std::string> captions;
    std::vector<uint64_t> seeds;
    std::vector<torch::Tensor> styles;
    for (int64_t k = i; k < end; ++k) {
      const auto& r = report.records[static_cast<std::size_t>(k)];
      captions.push_back(r.caption);
      seeds.push_back(r.seed);
      styles.push_back(pairs[static_cast<std::size_t>(r.pair)].style);
    }
    auto z_styled = sample_latents(m, &style_net, captions, torch::stack(styles), seeds);
    auto z_base = sample_latents(m, nullptr, captions, torch::Tensor(), seeds);
    torch::NoGradGuard g;
    auto img_styled = m.ae->decode(z_styled);
    auto img_base = m.ae->decode(z_base);
    for (int64_t k = i; k < end; ++k) {
      stylized[static_cast<std::size_t>(k)] = img_styled[k - i];
      base[static_cast<std::size_t>(k)] = img_base[k - i];
    }
  }

  // Shuffled pairing: a fixed cyclic shift by half the set never maps a
  // record onto one sharing its pair (and thus caption) when n > seeds.
  const int64_t shift = std::max<int64_t>(opts.seeds_per_pair, n / 2);
  std::vector<double> sd, bsd, st, sh;
  for (int64_t k = 0; k < n; ++k) {
    auto& r = report.records[static_cast<std::size_t>(k)];
    const auto& target = pairs[static_cast<std::size_t>(r.pair)].style;
    const auto& img = stylized[static_cast<std::size_t>(k)];
    r.style_distance = style_distance(m.ae, img, target, opts.reg);
    r.base_style_distance = style_distance(m.ae, base[static_cast<std::size_t>(k)], target, opts.reg);
    r.structure_score = structure_score(m.ae, img, base[static_cast<std::size_t>(k)], opts.reg);
    r.shuffled_structure = structure_score(m.ae, img, base[static_cast<std::size_t>((k + shift) % n)], opts.reg);
    sd.push_back(r.style_distance);
    bsd.push_back(r.base_style_distance);
    st.push_back(r.structure_score);
    sh.push_back(r.shuffled_structure);
    if (opts.on_images) opts.on_images(r.id, img, base[static_cast<std::size_t>(k)]);
  }
  report.style_distance = mean_ci(sd);
  report.base_style_distance = mean_ci(bsd);
  report.structure_score = mean_ci(st);
  report.shuffled_structure = mean_ci(sh);
  return report;
}

}  // namespace controlstyle
