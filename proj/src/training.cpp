#include "controlstyle/training.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace controlstyle {
namespace {

std::vector<NamedParameter> named(const std::string& prefix, torch::nn::Module& m) {
  std::vector<NamedParameter> out;
  for (const auto& p : m.named_parameters(true)) out.push_back({prefix + p.key(), p.value()});
  return out;
}

torch::Tensor uniform_timesteps(std::mt19937_64& rng, int64_t batch, int T) {
  std::uniform_int_distribution<int64_t> dist(1, T);
  std::vector<int64_t> t(static_cast<std::size_t>(batch));
  for (auto& v : t) v = dist(rng);
  return torch::tensor(t, torch::kInt64);
}

std::vector<int64_t> to_vector(const torch::Tensor& t) {
  auto c = t.contiguous();
  return {c.data_ptr<int64_t>(), c.data_ptr<int64_t>() + c.numel()};
}

double cosine_lr(double base, int64_t step, int64_t total) {
  const double progress = static_cast<double>(step) / std::max<int64_t>(1, total);
  return base * (0.05 + 0.95 * 0.5 * (1 + std::cos(M_PI * progress)));
}

void set_lr(torch::optim::Adam& opt, double lr) {
  for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
}

}  // namespace

void freeze(FrozenModels& m) {
  for (torch::nn::Module* mod : {static_cast<torch::nn::Module*>(m.ae.get()),
                                 static_cast<torch::nn::Module*>(m.unet.get()),
                                 static_cast<torch::nn::Module*>(m.text.get())}) {
    for (auto& p : mod->parameters()) p.set_requires_grad(false);
    mod->eval();
  }
}

// ---------------------------------------------------------------------------
// Triplets
// ---------------------------------------------------------------------------

TripletStream::TripletStream(const ContentSet& content, const StyleSet& styles, uint64_t seed)
    : content_(&content), styles_(&styles), rng_(seed) {
  if (content.size() == 0) throw std::invalid_argument("make_triplets: empty content dataset");
  if (styles.size() == 0) throw std::invalid_argument("make_triplets: empty style dataset");
  order_.resize(content.size());
  cursor_ = order_.size();
}

std::pair<int, int> TripletStream::next_ids() {
  if (cursor_ >= order_.size()) {
    std::iota(order_.begin(), order_.end(), 0);
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
  }
  const int c = order_[cursor_++];
  std::uniform_int_distribution<int> pick(0, static_cast<int>(styles_->size()) - 1);
  return {c, pick(rng_)};
}

Triplet TripletStream::next() {
  auto [c, s] = next_ids();
  return {content_->images[c], content_->captions[static_cast<std::size_t>(c)], styles_->images[s], c, s};
}

std::vector<Triplet> TripletStream::next_batch(int n) {
  std::vector<Triplet> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(next());
  return out;
}

TripletStream make_triplets(const ContentSet& content, const StyleSet& styles, uint64_t seed) {
  return TripletStream(content, styles, seed);
}

// ---------------------------------------------------------------------------
// Base model
// ---------------------------------------------------------------------------

BaseTrainConfig BaseTrainConfig::from_config(const Config& cfg) {
  BaseTrainConfig c;
  c.steps = static_cast<int>(cfg.get_int("base.steps", c.steps));
  c.batch = static_cast<int>(cfg.get_int("base.batch", c.batch));
  c.lr = cfg.get_double("base.lr", c.lr);
  c.holdout_fraction = cfg.get_double("base.holdout", c.holdout_fraction);
  c.seed = static_cast<uint64_t>(cfg.get_int("seed", 0));
  c.log_every = static_cast<int>(cfg.get_int("base.log_every", c.log_every));
  return c;
}

double denoise_eval_loss(UNet& unet, TextEncoder& text, const NoiseSchedule& sched, const torch::Tensor& latents,
                         const torch::Tensor& tokens, uint64_t seed, int draws, int batch) {
  torch::NoGradGuard g;
  const bool was_training = unet->is_training();
  unet->eval();
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  std::mt19937_64 rng(seed);
  const int64_t n = latents.size(0);
  double sum = 0;
  int64_t count = 0;
  for (int d = 0; d < draws; ++d) {
    for (int64_t i = 0; i < n; i += batch) {
      auto z0 = latents.slice(0, i, std::min(n, i + batch));
      auto tok = tokens.slice(0, i, std::min(n, i + batch));
      auto t = uniform_timesteps(rng, z0.size(0), sched.steps());
      auto eps = torch::randn(z0.sizes(), gen, z0.options());
      auto z_t = q_sample(z0, t, eps, sched);
      auto pred = unet->forward(z_t, t, text->forward(tok)).eps;
      sum += denoise_loss(pred, eps, t).item<double>() * static_cast<double>(z0.size(0));
      count += z0.size(0);
    }
  }
  if (was_training) unet->train();
  return count > 0 ? sum / static_cast<double>(count) : 0.0;
}

BaseTrainReport train_base_model(UNet& unet, TextEncoder& text, const NoiseSchedule& sched,
                                 const torch::Tensor& latents, const torch::Tensor& tokens,
                                 const BaseTrainConfig& cfg, const std::function<void(int, double)>& on_log) {
  if (!latents.defined() || latents.size(0) == 0) throw std::invalid_argument("train_base_model: empty dataset");
  if (latents.size(0) != tokens.size(0)) throw std::invalid_argument("train_base_model: latents/tokens count mismatch");
  if (cfg.steps < 0 || cfg.batch < 1) throw std::invalid_argument("train_base_model: bad steps or batch");

  const int64_t n = latents.size(0);
  const int64_t n_hold =
      n > 1 ? std::max<int64_t>(1, static_cast<int64_t>(std::llround(n * cfg.holdout_fraction))) : 0;
  const int64_t n_train = n - n_hold;
  std::mt19937_64 rng(cfg.seed);
  std::vector<int64_t> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  auto idx = torch::tensor(perm, torch::kInt64);
  auto z_train = latents.index_select(0, idx.slice(0, 0, n_train));
  auto tok_train = tokens.index_select(0, idx.slice(0, 0, n_train));
  auto z_hold = latents.index_select(0, idx.slice(0, n_train, n));
  auto tok_hold = tokens.index_select(0, idx.slice(0, n_train, n));

  std::vector<torch::Tensor> params = unet->parameters();
  for (auto& p : text->parameters()) params.push_back(p);
  torch::optim::Adam opt(params, torch::optim::AdamOptions(cfg.lr));
  auto gen = at::make_generator<at::CPUGeneratorImpl>(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<int64_t> pick(0, n_train - 1);

  BaseTrainReport report;
  report.initial_loss = denoise_eval_loss(unet, text, sched, z_train.slice(0, 0, std::min<int64_t>(n_train, 512)),
                                          tok_train.slice(0, 0, std::min<int64_t>(n_train, 512)), cfg.seed + 1, 1);
  unet->train();
  text->train();
  double smoothed = report.initial_loss;
  double tail_sum = 0;
  int tail_count = 0;
  const int tail_start = cfg.steps - std::max(1, cfg.steps / 10);
  for (int step = 0; step < cfg.steps; ++step) {
    set_lr(opt, cosine_lr(cfg.lr, step, cfg.steps));
    std::vector<int64_t> rows(static_cast<std::size_t>(cfg.batch));
    for (auto& r : rows) r = pick(rng);
    auto rows_t = torch::tensor(rows, torch::kInt64);
    auto z0 = z_train.index_select(0, rows_t);
    auto tok = tok_train.index_select(0, rows_t);
    auto t = uniform_timesteps(rng, cfg.batch, sched.steps());
    auto eps = torch::randn(z0.sizes(), gen, z0.options());
    auto z_t = q_sample(z0, t, eps, sched);
    auto loss = denoise_loss(unet->forward(z_t, t, text->forward(tok)).eps, eps, t);
    opt.zero_grad();
    loss.backward();
    opt.step();

    const double l = loss.item<double>();
    if (!std::isfinite(l)) throw std::runtime_error("train_base_model: non-finite loss at step " + std::to_string(step));
    smoothed = 0.98 * smoothed + 0.02 * l;
    if (step >= tail_start) {
      tail_sum += l;
      ++tail_count;
    }
    if (cfg.log_every > 0 && (step + 1) % cfg.log_every == 0) {
      report.curve.emplace_back(step + 1, smoothed);
      if (on_log) on_log(step + 1, smoothed);
    }
  }
  unet->eval();
  text->eval();
  report.train_plateau = tail_count > 0 ? tail_sum / tail_count : report.initial_loss;
  report.heldout_loss = n_hold > 0 ? denoise_eval_loss(unet, text, sched, z_hold, tok_hold, cfg.seed + 2)
                                   : report.train_plateau;
  return report;
}

// ---------------------------------------------------------------------------
// ControlStyle
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(lr > 0) || !(disc_lr > 0)) throw std::invalid_argument("TrainConfig: learning rates must be positive");
  if (batch < 1) throw std::invalid_argument("TrainConfig: batch must be positive");
  if (iterations < 0) throw std::invalid_argument("TrainConfig: iterations must be non-negative");
  for (double w : {lambda_ldm, lambda_style, lambda_content, lambda_adv})
    if (!(w >= 0) || !std::isfinite(w)) throw std::invalid_argument("TrainConfig: loss weights must be >= 0");
  if (!(reg_t_max_fraction > 0 && reg_t_max_fraction <= 1))
    throw std::invalid_argument("TrainConfig: reg_t_max_fraction must lie in (0, 1]");
}

TrainConfig TrainConfig::from_config(const Config& cfg) {
  TrainConfig c;
  c.lr = cfg.get_double("cs.lr", c.lr);
  c.disc_lr = cfg.get_double("cs.disc_lr", c.disc_lr);
  c.batch = static_cast<int>(cfg.get_int("cs.batch", c.batch));
  c.iterations = static_cast<int>(cfg.get_int("cs.iterations", c.iterations));
  c.lambda_ldm = cfg.get_double("cs.lambda_ldm", c.lambda_ldm);
  c.lambda_style = cfg.get_double("cs.lambda_style", c.lambda_style);
  c.lambda_content = cfg.get_double("cs.lambda_content", c.lambda_content);
  c.lambda_adv = cfg.get_double("cs.lambda_adv", c.lambda_adv);
  c.reg_t_max_fraction = cfg.get_double("cs.reg_t_max", c.reg_t_max_fraction);
  c.seed = static_cast<uint64_t>(cfg.get_int("seed", 0));
  c.reg = RegConfig::from_config(cfg);
  c.aug = AugmentConfig::from_config(cfg);
  c.log_every = static_cast<int>(cfg.get_int("cs.log_every", c.log_every));
  c.checkpoint_every = static_cast<int>(cfg.get_int("cs.checkpoint_every", c.checkpoint_every));
  c.divergence_factor = cfg.get_double("cs.divergence_factor", c.divergence_factor);
  c.divergence_window = static_cast<int>(cfg.get_int("cs.divergence_window", c.divergence_window));
  c.validate();
  return c;
}

nlohmann::json LossReport::to_json() const {
  return {{"step", step},     {"l_ldm", l_ldm}, {"l_style", l_style}, {"l_content", l_content},
          {"l_adv", l_adv},   {"l_total", l_total}, {"l_disc", l_disc}, {"t", timesteps}};
}

void ParameterPartition::audit(const std::vector<torch::nn::Module*>& modules) const {
  std::set<const void*> all;
  for (auto* m : modules)
    for (auto& p : m->parameters()) all.insert(p.unsafeGetTensorImpl());

  std::map<const void*, std::string> owner;
  auto visit = [&](const std::vector<NamedParameter>& set, const char* set_name) {
    for (const auto& p : set) {
      const void* key = p.tensor.unsafeGetTensorImpl();
      if (!all.count(key))
        throw std::logic_error(std::string("partition: ") + set_name + " parameter '" + p.name +
                               "' belongs to no audited module");
      auto [it, fresh] = owner.emplace(key, std::string(set_name) + ":" + p.name);
      if (!fresh)
        throw std::logic_error("partition: parameter '" + p.name + "' is in both " + it->second + " and " + set_name);
    }
  };
  visit(frozen, "frozen");
  visit(trainable, "trainable");
  visit(adversarial, "adversarial");
  if (owner.size() != all.size())
    throw std::logic_error("partition: " + std::to_string(all.size() - owner.size()) + " parameters are unassigned");
  for (const auto& p : frozen)
    if (p.tensor.requires_grad()) throw std::logic_error("partition: frozen parameter '" + p.name + "' requires grad");
}

ControlStyleTrainer::ControlStyleTrainer(FrozenModels frozen, ModulationNetwork mod, Discriminator disc,
                                         TrainConfig cfg)
    : frozen_(std::move(frozen)),
      mod_(std::move(mod)),
      disc_(std::move(disc)),
      cfg_(std::move(cfg)),
      gen_opt_(mod_->parameters(), torch::optim::AdamOptions(cfg_.lr)),
      disc_opt_(disc_->parameters(), torch::optim::AdamOptions(cfg_.disc_lr)),
      rng_(cfg_.seed),
      noise_gen_(at::make_generator<at::CPUGeneratorImpl>(noise_seed(cfg_.seed))) {
  cfg_.validate();
  cfg_.reg.validate(frozen_.ae->config().num_upsample_blocks);
  freeze(frozen_);
  mod_->train();
  disc_->train();
  for (const auto& [name, params] : mod_->parameter_groups()) grad_seen_[name] = false;
  partition().audit({frozen_.ae.get(), frozen_.unet.get(), frozen_.text.get(), mod_.get(), disc_.get()});
}

ParameterPartition ControlStyleTrainer::partition() {
  ParameterPartition p;
  for (auto& np : named("ae.", *frozen_.ae)) p.frozen.push_back(np);
  for (auto& np : named("unet.", *frozen_.unet)) p.frozen.push_back(np);
  for (auto& np : named("text.", *frozen_.text)) p.frozen.push_back(np);
  p.trainable = named("modulation.", *mod_);
  p.adversarial = named("disc.", *disc_);
  return p;
}

const StyleTarget& ControlStyleTrainer::cached_target(const Triplet& t, const torch::Tensor& style_image) {
  if (t.style_id >= 0) {
    auto it = style_cache_.find(t.style_id);
    if (it != style_cache_.end()) return it->second;
  }
  auto target = style_target(frozen_.ae, style_image.unsqueeze(0), cfg_.reg);
  if (t.style_id < 0) {
    // Anonymous styles are not cached; keep a single scratch slot.
    style_cache_[-1] = std::move(target);
    return style_cache_[-1];
  }
  return style_cache_.emplace(t.style_id, std::move(target)).first->second;
}

LossReport ControlStyleTrainer::step(std::span<const Triplet> batch) {
  if (batch.empty()) throw std::invalid_argument("controlstyle_train_step: empty batch");
  const auto B = static_cast<int64_t>(batch.size());
  const NoiseSchedule& sched = frozen_.schedule;

  std::vector<torch::Tensor> xs, ss;
  std::vector<std::string> captions;
  for (const auto& tr : batch) {
    xs.push_back(tr.image);
    ss.push_back(tr.style);
    captions.push_back(tr.caption);
  }
  auto x = torch::stack(xs);
  auto c_style = torch::stack(ss);

  torch::Tensor text, z0;
  {
    torch::NoGradGuard g;
    text = frozen_.text->forward(tokenize_captions(captions));
    z0 = frozen_.ae->encode(x);
  }

  auto t = uniform_timesteps(rng_, B, sched.steps());
  auto eps = torch::randn(z0.sizes(), noise_gen_, z0.options());
  auto z_t = q_sample(z0, t, eps, sched);
  auto eps_pred = modulated_forward(frozen_.unet, mod_, z_t, t, text, c_style);
  auto l_ldm = denoise_loss(eps_pred, eps, t);
  auto z0_hat = predict_clean(z_t, t, eps_pred, sched);

  // Regularized subset: samples whose t lies within the configured range.
  const auto t_vec = to_vector(t);
  const double t_cap = cfg_.reg_t_max_fraction * sched.steps();
  std::vector<int64_t> keep;
  for (int64_t b = 0; b < B; ++b)
    if (static_cast<double>(t_vec[static_cast<std::size_t>(b)]) <= t_cap) keep.push_back(b);

  auto zero = torch::zeros({}, z0.options());
  torch::Tensor l_style = zero, l_content = zero, l_adv = zero, x0_hat;
  if (!keep.empty()) {
    auto rows = torch::tensor(keep, torch::kInt64);
    auto z0_hat_k = z0_hat.index_select(0, rows);
    auto z0_k = z0.index_select(0, rows);
    auto style_k = c_style.index_select(0, rows);

    StyleTarget target;
    const std::size_t n_blocks = cfg_.reg.style_blocks.size();
    target.mean.resize(n_blocks);
    target.variance.resize(n_blocks);
    for (std::size_t j = 0; j < n_blocks; ++j) {
      std::vector<torch::Tensor> means, vars;
      for (int64_t b : keep) {
        const auto& tr = batch[static_cast<std::size_t>(b)];
        const auto& st = cached_target(tr, tr.style);
        means.push_back(st.mean[j]);
        vars.push_back(st.variance[j]);
      }
      target.mean[j] = torch::cat(means);
      target.variance[j] = torch::cat(vars);
    }

    auto stack = frozen_.ae->decode_features(z0_hat_k);
    l_style = style_reg_from_stack(stack, target, cfg_.reg);
    torch::Tensor content_target;
    {
      torch::NoGradGuard g;
      content_target = frozen_.ae->decode_features(z0_k, cfg_.reg.content_block)
                           .blocks[static_cast<std::size_t>(cfg_.reg.content_block - 1)];
    }
    l_content =
        content_reg_from_features(stack.blocks[static_cast<std::size_t>(cfg_.reg.content_block - 1)], content_target);
    x0_hat = stack.image.clamp(-1.0, 1.0);
    l_adv = gen_adv_loss(disc_, x0_hat, style_k);
    c_style = style_k;
  }

  auto total = cfg_.lambda_ldm * l_ldm + cfg_.lambda_style * l_style + cfg_.lambda_content * l_content +
               cfg_.lambda_adv * l_adv;

  LossReport r;
  r.step = step_;
  r.l_ldm = l_ldm.item<double>();
  r.l_style = l_style.item<double>();
  r.l_content = l_content.item<double>();
  r.l_adv = l_adv.item<double>();
  r.l_total = total.item<double>();
  r.timesteps = t_vec;
  for (double v : {r.l_ldm, r.l_style, r.l_content, r.l_adv, r.l_total}) {
    if (!std::isfinite(v)) {
      std::ostringstream msg;
      msg << "non-finite loss at step " << step_ << ": " << r.to_json().dump();
      throw NonFiniteLoss(msg.str(), r);
    }
  }

  gen_opt_.zero_grad();
  total.backward();
  for (const auto& [name, params] : mod_->parameter_groups()) {
    if (grad_seen_[name]) continue;
    for (const auto& p : params)
      if (p.grad().defined() && p.grad().abs().max().item<double>() > 0) {
        grad_seen_[name] = true;
        break;
      }
  }
  gen_opt_.step();

  if (x0_hat.defined()) {
    const uint64_t aug_seed = rng_();
    auto c_aug = augment_style(c_style, aug_seed, cfg_.aug);
    auto l_disc = disc_step_loss(disc_, c_style, c_aug, x0_hat.detach());
    disc_opt_.zero_grad();
    l_disc.backward();
    disc_opt_.step();
    r.l_disc = l_disc.item<double>();
  }
  ++step_;
  return r;
}

LossReport controlstyle_train_step(std::span<const Triplet> batch, ControlStyleTrainer& trainer) {
  return trainer.step(batch);
}

std::vector<LossReport> train_controlstyle(ControlStyleTrainer& trainer, TripletStream& stream,
                                           const TrainRunOptions& opts) {
  const auto& cfg = trainer.config();
  std::vector<LossReport> history;
  std::deque<double> window;
  double window_sum = 0;
  double initial = 0;  // mean total loss over the first full window
  const int w = std::max(1, cfg.divergence_window);
  for (int i = 0; i < cfg.iterations; ++i) {
    auto batch = stream.next_batch(cfg.batch);
    auto r = trainer.step(batch);
    history.push_back(r);
    if (opts.on_step) opts.on_step(r);

    window.push_back(r.l_total);
    window_sum += r.l_total;
    if (static_cast<int>(window.size()) > w) {
      window_sum -= window.front();
      window.pop_front();
    }
    const double avg = window_sum / static_cast<double>(window.size());
    if (i + 1 == w) initial = avg;
    if (i + 1 > w && initial > 0 && avg > cfg.divergence_factor * initial) {
      std::ostringstream msg;
      msg << "training diverged at step " << r.step << ": moving-average total loss " << avg << " exceeds "
          << cfg.divergence_factor << "x the initial " << initial;
      throw std::runtime_error(msg.str());
    }
    if (opts.on_checkpoint && cfg.checkpoint_every > 0 && (i + 1) % cfg.checkpoint_every == 0 &&
        i + 1 < cfg.iterations)
      opts.on_checkpoint(trainer.steps_done());
  }
  return history;
}

// ---------------------------------------------------------------------------
// Edge branch
// ---------------------------------------------------------------------------

EdgeTrainConfig EdgeTrainConfig::from_config(const Config& cfg) {
  EdgeTrainConfig c;
  c.steps = static_cast<int>(cfg.get_int("edge.steps", c.steps));
  c.batch = static_cast<int>(cfg.get_int("edge.batch", c.batch));
  c.lr = cfg.get_double("edge.lr", c.lr);
  c.seed = static_cast<uint64_t>(cfg.get_int("seed", 0));
  return c;
}

std::vector<double> train_edge_branch(FrozenModels& frozen, ModulationNetwork& edge, const torch::Tensor& latents,
                                      const torch::Tensor& tokens, const torch::Tensor& edges,
                                      const EdgeTrainConfig& cfg, const std::function<void(int, double)>& on_log) {
  if (!latents.defined() || latents.size(0) == 0) throw std::invalid_argument("train_edge_branch: empty dataset");
  if (latents.size(0) != edges.size(0) || latents.size(0) != tokens.size(0))
    throw std::invalid_argument("train_edge_branch: dataset size mismatch");
  freeze(frozen);
  edge->train();
  torch::optim::Adam opt(edge->parameters(), torch::optim::AdamOptions(cfg.lr));
  std::mt19937_64 rng(cfg.seed);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(cfg.seed ^ 0x94d049bb133111ebULL);
  std::uniform_int_distribution<int64_t> pick(0, latents.size(0) - 1);
  std::vector<double> losses;
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<int64_t> rows(static_cast<std::size_t>(cfg.batch));
    for (auto& r : rows) r = pick(rng);
    auto rows_t = torch::tensor(rows, torch::kInt64);
    auto z0 = latents.index_select(0, rows_t);
    torch::Tensor text;
    {
      torch::NoGradGuard g;
      text = frozen.text->forward(tokens.index_select(0, rows_t));
    }
    auto t = uniform_timesteps(rng, cfg.batch, frozen.schedule.steps());
    auto eps = torch::randn(z0.sizes(), gen, z0.options());
    auto z_t = q_sample(z0, t, eps, frozen.schedule);
    auto pred = modulated_forward(frozen.unet, edge, z_t, t, text, edges.index_select(0, rows_t));
    auto loss = denoise_loss(pred, eps, t);
    opt.zero_grad();
    loss.backward();
    opt.step();
    losses.push_back(loss.item<double>());
    if (!std::isfinite(losses.back()))
      throw std::runtime_error("train_edge_branch: non-finite loss at step " + std::to_string(step));
    if (on_log) on_log(step + 1, losses.back());
  }
  edge->eval();
  return losses;
}

}  // namespace controlstyle
