#include "controlstyle/pipeline.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "controlstyle/data_synth.hpp"
#include "controlstyle/image.hpp"

namespace controlstyle {
namespace {

void emit(const LogFn& log, const std::string& msg) {
  if (log) log(msg);
}

nlohmann::json config_json(const Config& cfg) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : cfg.entries()) j[k] = v;
  return j;
}

torch::Tensor latents_of(Autoencoder& ae, const torch::Tensor& images, int64_t batch = 64) {
  torch::NoGradGuard g;
  std::vector<torch::Tensor> parts;
  for (int64_t i = 0; i < images.size(0); i += batch)
    parts.push_back(ae->encode(images.slice(0, i, std::min(images.size(0), i + batch))));
  return torch::cat(parts);
}

nlohmann::json partition_manifest(const ParameterPartition& p) {
  auto names = [](const std::vector<NamedParameter>& set) {
    auto arr = nlohmann::json::array();
    int64_t count = 0;
    for (const auto& np : set) {
      arr.push_back(np.name);
      count += np.tensor.numel();
    }
    return nlohmann::json{{"parameters", arr}, {"scalars", count}};
  };
  return {{"frozen", names(p.frozen)}, {"trainable", names(p.trainable)}, {"adversarial", names(p.adversarial)}};
}

Image grid_of(const std::vector<torch::Tensor>& images, int cols) {
  std::vector<Image> tiles;
  for (const auto& t : images) {
    auto img = from_tensor(t);
    if (img.channels == 1) {
      Image rgb(img.width, img.height, 3);
      for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
          for (int c = 0; c < 3; ++c) rgb.at(y, x, c) = img.at(y, x, 0);
      img = std::move(rgb);
    }
    tiles.push_back(std::move(img));
  }
  return tile(tiles, cols);
}

}  // namespace

Workspace Workspace::from_config(const Config& cfg) { return {fs::path(cfg.get_string("work_dir", "work"))}; }

void require_file(const fs::path& path, const char* what) {
  if (!fs::exists(path)) throw std::runtime_error(std::string(what) + " not found: " + path.string());
}

NoiseSchedule schedule_from_config(const Config& cfg) {
  return make_linear_schedule(static_cast<int>(cfg.get_int("diffusion.T", 200)),
                              cfg.get_double("diffusion.beta_start", 5e-4), cfg.get_double("diffusion.beta_end", 0.1));
}

nlohmann::json lineage_entry(const fs::path& path) {
  return {{"path", path.string()}, {"digest", fs::exists(path) ? file_digest(path) : std::string()}};
}

void save_autoencoder(const fs::path& path, Autoencoder& ae, const nlohmann::json& meta) {
  Archive ar("autoencoder");
  ar.meta() = meta.is_object() ? meta : nlohmann::json::object();
  ar.meta()["autoencoder"] = ae->config().to_json();
  put_module(ar, "ae.", *ae);
  fs::create_directories(path.parent_path());
  ar.save(path);
}

Autoencoder load_autoencoder(const fs::path& path) {
  require_file(path);
  auto ar = Archive::load(path);
  if (ar.kind() != "autoencoder") throw std::runtime_error(path.string() + ": not an autoencoder checkpoint");
  Autoencoder ae(AutoencoderConfig::from_json(ar.meta().at("autoencoder")));
  load_module(ar, "ae.", *ae);
  ae->eval();
  return ae;
}

void save_base(const fs::path& path, BaseModel& m, const nlohmann::json& meta) {
  Archive ar("base");
  ar.meta() = meta.is_object() ? meta : nlohmann::json::object();
  ar.meta()["unet"] = m.unet->config().to_json();
  ar.meta()["text_dim"] = m.text->dim();
  ar.put("schedule.betas", torch::tensor(std::vector<double>(m.schedule.betas().begin(), m.schedule.betas().end()),
                                         torch::kFloat64));
  put_module(ar, "unet.", *m.unet);
  put_module(ar, "text.", *m.text);
  fs::create_directories(path.parent_path());
  ar.save(path);
}

BaseModel load_base(const fs::path& path) {
  require_file(path);
  auto ar = Archive::load(path);
  if (ar.kind() != "base") throw std::runtime_error(path.string() + ": not a base-model checkpoint");
  BaseModel m;
  m.unet = UNet(UNetConfig::from_json(ar.meta().at("unet")));
  m.text = TextEncoder(ar.meta().at("text_dim").get<int64_t>());
  load_module(ar, "unet.", *m.unet);
  load_module(ar, "text.", *m.text);
  auto betas = ar.get("schedule.betas").contiguous();
  m.schedule = NoiseSchedule(std::vector<double>(betas.data_ptr<double>(), betas.data_ptr<double>() + betas.numel()));
  m.unet->eval();
  m.text->eval();
  return m;
}

FrozenModels load_frozen(const Workspace& ws) {
  FrozenModels f;
  f.ae = load_autoencoder(ws.autoencoder());
  auto base = load_base(ws.base());
  f.unet = base.unet;
  f.text = base.text;
  f.schedule = base.schedule;
  freeze(f);
  return f;
}

void save_branch(const fs::path& path, ModulationNetwork& net, Discriminator* disc, const nlohmann::json& meta) {
  Archive ar("modulation");
  ar.meta() = meta.is_object() ? meta : nlohmann::json::object();
  ar.meta()["branch_kind"] = branch_kind_name(net->config().kind);
  ar.meta()["modulation"] = net->config().to_json();
  ar.meta()["unet"] = net->unet_config().to_json();
  ar.meta()["has_discriminator"] = disc != nullptr;
  put_module(ar, "modulation.", *net);
  if (disc) put_module(ar, "disc.", **disc);
  fs::create_directories(path.parent_path());
  ar.save(path);
}

ModulationNetwork load_branch(const fs::path& path, const UNetConfig& base, BranchKind expected, Discriminator* disc) {
  require_file(path);
  auto ar = Archive::load(path);
  if (ar.kind() != "modulation") throw std::runtime_error(path.string() + ": not a modulation checkpoint");
  const auto kind = ar.meta().at("branch_kind").get<std::string>();
  if (kind != branch_kind_name(expected))
    throw std::runtime_error(path.string() + ": branch kind '" + kind + "', expected '" + branch_kind_name(expected) +
                             "'");
  if (!(UNetConfig::from_json(ar.meta().at("unet")) == base))
    throw std::runtime_error(path.string() + ": architecture mismatch with the base U-Net");
  ModulationNetwork net(base, ModulationConfig::from_json(ar.meta().at("modulation")));
  load_module(ar, "modulation.", *net);
  net->eval();
  if (disc) {
    if (!ar.meta().value("has_discriminator", false))
      throw std::runtime_error(path.string() + ": checkpoint carries no discriminator");
    load_module(ar, "disc.", **disc);
  }
  return net;
}

nlohmann::json RunManifest::to_json() const {
  nlohmann::json j;
  j["stage"] = stage;
  if (config) {
    j["config_hash"] = config->hash();
    j["seed"] = config->get_int("seed", 0);
    j["config"] = config_json(*config);
  }
  j["inputs"] = nlohmann::json::array();
  for (const auto& p : inputs) j["inputs"].push_back(lineage_entry(p));
  j["outputs"] = nlohmann::json::array();
  for (const auto& p : outputs) j["outputs"].push_back(lineage_entry(p));
  j["results"] = results;
  return j;
}

void RunManifest::write(const fs::path& path) const {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_json().dump(2) << '\n';
}

torch::Tensor load_image_tensor(const fs::path& png) {
  require_file(png, "image");
  return to_tensor(read_png(png));
}

ContentSet load_content(const fs::path& data_dir) {
  ContentSet set;
  std::vector<Image> images;
  for (const auto& r : data::read_scene_manifest(data_dir)) {
    images.push_back(read_png(data_dir / r.path));
    set.captions.push_back(r.caption);
  }
  if (images.empty()) throw std::runtime_error("no scenes in " + data_dir.string());
  set.images = to_batch(images);
  return set;
}

StyleSet load_style_set(const fs::path& data_dir) {
  StyleSet set;
  std::vector<Image> images;
  for (const auto& r : data::read_style_manifest(data_dir)) {
    images.push_back(read_png(data_dir / r.path));
    set.classes.push_back(r.style_class);
  }
  if (images.empty()) throw std::runtime_error("no styles in " + data_dir.string());
  set.images = to_batch(images);
  return set;
}

nlohmann::json stage_gen_data(const Config& cfg, const LogFn& log) {
  const auto ws = Workspace::from_config(cfg);
  const int n_scenes = static_cast<int>(cfg.get_int("data.scenes", 2000));
  const int n_styles = static_cast<int>(cfg.get_int("data.styles", 400));
  const int size = static_cast<int>(cfg.get_int("image_size", 64));
  const auto seed = static_cast<uint64_t>(cfg.get_int("seed", 0));
  emit(log, "generating " + std::to_string(n_scenes) + " scenes and " + std::to_string(n_styles) + " styles");
  data::write_datasets(ws.data(), n_scenes, n_styles, seed, size);

  fs::create_directories(ws.data() / "edges");
  char name[64];
  for (const auto& r : data::read_scene_manifest(ws.data())) {
    std::snprintf(name, sizeof name, "edges/edge_%05d.png", r.id);
    write_png(ws.data() / name, data::edge_map(read_png(ws.data() / r.path)));
  }

  RunManifest m{"gen-data", &cfg, {}, {ws.data() / "scenes.jsonl", ws.data() / "styles.jsonl"}};
  m.results = {{"scenes", n_scenes}, {"styles", n_styles}, {"image_size", size}};
  m.write(ws.runs() / "gen-data.json");
  return m.results;
}

nlohmann::json stage_train_ae(const Config& cfg, const LogFn& log) {
  const auto ws = Workspace::from_config(cfg);
  auto content = load_content(ws.data());
  auto styles = load_style_set(ws.data());
  auto images = torch::cat({content.images, styles.images});
  auto ae_cfg = AutoencoderConfig::from_config(cfg);
  auto train_cfg = AeTrainConfig::from_config(cfg);
  torch::manual_seed(train_cfg.seed);
  Autoencoder ae(ae_cfg);

  fs::create_directories(ws.logs());
  std::ofstream curve(ws.logs() / "ae_loss.jsonl");
  auto report = train_autoencoder(ae, images, train_cfg, [&](int epoch, double loss) {
    curve << nlohmann::json{{"epoch", epoch + 1}, {"mse", loss}}.dump() << '\n' << std::flush;
    std::ostringstream msg;
    msg << "ae epoch " << epoch + 1 << "/" << train_cfg.epochs << " mse " << loss;
    emit(log, msg.str());
  });

  nlohmann::json results = {{"heldout_mse", report.heldout_mse},
                            {"heldout_psnr", report.heldout_psnr},
                            {"target_psnr", train_cfg.target_psnr},
                            {"converged", report.converged},
                            {"latent_scale", report.latent_scale},
                            {"epoch_loss", report.epoch_loss}};
  save_autoencoder(ws.autoencoder(), ae, {{"report", results}, {"config_hash", cfg.hash()}});
  RunManifest m{"train-ae", &cfg, {ws.data() / "scenes.jsonl", ws.data() / "styles.jsonl"}, {ws.autoencoder()}};
  m.results = results;
  m.write(ws.runs() / "train-ae.json");
  std::ostringstream msg;
  msg << "autoencoder held-out PSNR " << report.heldout_psnr << " dB";
  emit(log, msg.str());
  return results;
}

nlohmann::json stage_train_base(const Config& cfg, const LogFn& log) {
  const auto ws = Workspace::from_config(cfg);
  auto ae = load_autoencoder(ws.autoencoder());
  auto content = load_content(ws.data());
  auto latents = latents_of(ae, content.images);
  auto tokens = tokenize_captions(content.captions);

  // The base model stands in for a pretrained generator, so it may see more
  // scenes than the branch corpus. Extra scenes are rendered in memory.
  const int64_t extra = cfg.get_int("base.extra_scenes", 0);
  if (extra > 0) {
    const auto seed = static_cast<uint64_t>(cfg.get_int("seed", 0));
    const int size = static_cast<int>(ae->config().image_size);
    std::vector<torch::Tensor> z_parts{latents}, tok_parts{tokens};
    for (int64_t i = 0; i < extra; i += 256) {
      std::vector<Image> imgs;
      std::vector<std::string> caps;
      for (int64_t k = i; k < std::min(extra, i + 256); ++k) {
        auto sc = data::gen_scene(data::record_seed(seed ^ 0x42415345ULL, static_cast<uint64_t>(k)), size);
        imgs.push_back(std::move(sc.image));
        caps.push_back(std::move(sc.caption));
      }
      z_parts.push_back(latents_of(ae, to_batch(imgs)));
      tok_parts.push_back(tokenize_captions(caps));
    }
    latents = torch::cat(z_parts);
    tokens = torch::cat(tok_parts);
    emit(log, "base corpus: " + std::to_string(latents.size(0)) + " scenes");
  }

  auto train_cfg = BaseTrainConfig::from_config(cfg);
  torch::manual_seed(train_cfg.seed + 11);
  BaseModel m{UNet(UNetConfig::from_config(cfg)), TextEncoder(cfg.get_int("text.dim", 64)),
              schedule_from_config(cfg)};

  fs::create_directories(ws.logs());
  std::ofstream curve(ws.logs() / "base_loss.jsonl");
  auto report = train_base_model(m.unet, m.text, m.schedule, latents, tokens, train_cfg, [&](int step, double loss) {
    curve << nlohmann::json{{"step", step}, {"loss", loss}}.dump() << '\n' << std::flush;
    std::ostringstream msg;
    msg << "base step " << step << "/" << train_cfg.steps << " loss " << loss;
    emit(log, msg.str());
  });

  nlohmann::json results = {{"initial_loss", report.initial_loss},
                            {"train_plateau", report.train_plateau},
                            {"heldout_loss", report.heldout_loss}};
  save_base(ws.base(), m, {{"report", results}, {"autoencoder", lineage_entry(ws.autoencoder())}});
  RunManifest man{"train-base", &cfg, {ws.autoencoder(), ws.data() / "scenes.jsonl"}, {ws.base()}};
  man.results = results;
  man.write(ws.runs() / "train-base.json");
  return results;
}

nlohmann::json stage_train_branch(const Config& cfg, BranchKind kind, const LogFn& log) {
  const auto ws = Workspace::from_config(cfg);
  auto frozen = load_frozen(ws);
  auto content = load_content(ws.data());
  const int64_t size = frozen.ae->config().image_size;
  const int64_t factor = frozen.ae->config().downsample_factor;
  const auto seed = static_cast<uint64_t>(cfg.get_int("seed", 0));
  const fs::path out = ws.branch(kind);
  const nlohmann::json lineage = {{"autoencoder", lineage_entry(ws.autoencoder())}, {"base", lineage_entry(ws.base())}};
  fs::create_directories(ws.logs());

  if (kind == BranchKind::Edge) {
    std::vector<Image> edges;
    for (const auto& r : data::read_scene_manifest(ws.data()))
      edges.push_back(data::edge_map(read_png(ws.data() / r.path)));
    auto edge_t = to_batch(edges);
    auto latents = latents_of(frozen.ae, content.images);
    auto tokens = tokenize_captions(content.captions);
    auto net = init_modulation(frozen.unet, ModulationConfig::edge(size, factor));
    torch::manual_seed(seed + 23);
    auto ecfg = EdgeTrainConfig::from_config(cfg);
    std::ofstream curve(ws.logs() / "edge_loss.jsonl");
    double smoothed = 0;
    auto losses = train_edge_branch(frozen, net, latents, tokens, edge_t, ecfg, [&](int step, double loss) {
      smoothed = step == 1 ? loss : 0.98 * smoothed + 0.02 * loss;
      curve << nlohmann::json{{"step", step}, {"l_ldm", loss}}.dump() << '\n';
      if (step % 100 == 0) emit(log, "edge step " + std::to_string(step) + " loss " + std::to_string(smoothed));
    });
    nlohmann::json results = {{"steps", ecfg.steps}, {"final_smoothed_loss", smoothed}};
    save_branch(out, net, nullptr, {{"lineage", lineage}, {"report", results}});
    RunManifest m{"train-controlstyle", &cfg, {ws.autoencoder(), ws.base()}, {out}};
    m.results = results;
    m.results["branch"] = "edge";
    m.write(ws.runs() / "train-edge.json");
    return m.results;
  }

  auto styles = load_style_set(ws.data());
  auto tcfg = TrainConfig::from_config(cfg);
  torch::manual_seed(seed + 17);
  auto net = init_modulation(frozen.unet, ModulationConfig::style(size, factor));
  Discriminator disc(frozen.ae->config().image_channels);
  ControlStyleTrainer trainer(frozen, net, disc, tcfg);
  const auto partition = partition_manifest(trainer.partition());
  auto stream = make_triplets(content, styles, seed + 29);

  const std::vector<std::string> preview_captions = {content.captions[0], content.captions[1], content.captions[2],
                                                     content.captions[3]};
  auto write_preview = [&](int64_t step) {
    std::vector<torch::Tensor> tiles;
    std::vector<uint64_t> seeds = {1, 2, 3, 4};
    for (int s = 0; s < 4; ++s) {
      const int64_t idx = (s * static_cast<int64_t>(styles.size())) / 4;
      auto style = styles.images[idx].unsqueeze(0).expand({4, -1, -1, -1}).contiguous();
      auto z = sample_latents(trainer.frozen(), &trainer.modulation(), preview_captions, style, seeds);
      torch::NoGradGuard g;
      tiles.push_back(styles.images[idx]);
      auto imgs = trainer.frozen().ae->decode(z);
      for (int k = 0; k < 4; ++k) tiles.push_back(imgs[k]);
    }
    fs::create_directories(ws.samples());
    write_png(ws.samples() / ("train_step_" + std::to_string(step) + ".png"), grid_of(tiles, 5));
    trainer.modulation()->train();
  };

  std::ofstream curve(ws.logs() / "controlstyle_loss.jsonl");
  TrainRunOptions opts;
  opts.on_step = [&](const LossReport& r) {
    curve << r.to_json().dump() << '\n';
    if (tcfg.log_every > 0 && (r.step + 1) % tcfg.log_every == 0) {
      curve.flush();
      std::ostringstream msg;
      msg << "controlstyle step " << r.step + 1 << "/" << tcfg.iterations << " ldm " << r.l_ldm << " style "
          << r.l_style << " content " << r.l_content << " adv " << r.l_adv << " disc " << r.l_disc;
      emit(log, msg.str());
    }
  };
  opts.on_checkpoint = [&](int64_t step) {
    save_branch(out, trainer.modulation(), &trainer.discriminator(),
                {{"lineage", lineage}, {"partition", partition}, {"step", step}});
    write_preview(step);
    emit(log, "checkpoint at step " + std::to_string(step));
  };
  auto history = train_controlstyle(trainer, stream, opts);

  nlohmann::json results = {{"iterations", tcfg.iterations}, {"branch", "style"}};
  if (!history.empty()) results["final"] = history.back().to_json();
  save_branch(out, trainer.modulation(), &trainer.discriminator(),
              {{"lineage", lineage}, {"partition", partition}, {"step", trainer.steps_done()}, {"report", results}});
  write_preview(trainer.steps_done());
  RunManifest m{"train-controlstyle", &cfg, {ws.autoencoder(), ws.base(), ws.data() / "styles.jsonl"}, {out}};
  m.results = results;
  m.write(ws.runs() / "train-controlstyle.json");
  return results;
}

std::vector<EvalPair> make_eval_pairs(int n, uint64_t seed, int image_size) {
  std::vector<EvalPair> pairs;
  for (int i = 0; i < n; ++i) {
    const auto scene = data::gen_scene(data::record_seed(seed ^ 0x4556414cULL, static_cast<uint64_t>(i)), image_size);
    const int cls = i % data::kStyleClasses;
    const auto spec = data::make_style_spec(cls, data::record_seed(seed ^ 0x45565354ULL, static_cast<uint64_t>(i)));
    pairs.push_back({scene.caption, to_tensor(data::gen_style(spec, image_size)), cls});
  }
  return pairs;
}

nlohmann::json stage_eval(const Config& cfg, const LogFn& log) {
  const auto ws = Workspace::from_config(cfg);
  auto frozen = load_frozen(ws);
  auto net = load_branch(ws.branch(BranchKind::Style), frozen.unet->config(), BranchKind::Style);
  const int n_pairs = static_cast<int>(cfg.get_int("eval.pairs", 32));
  auto pairs = make_eval_pairs(n_pairs, static_cast<uint64_t>(cfg.get_int("eval.seed", 12345)),
                               static_cast<int>(frozen.ae->config().image_size));
  EvalOptions opts;
  opts.seeds_per_pair = static_cast<int>(cfg.get_int("eval.seeds", 2));
  opts.seed = static_cast<uint64_t>(cfg.get_int("eval.seed", 12345));
  opts.batch = static_cast<int>(cfg.get_int("eval.batch", 32));
  opts.reg = RegConfig::from_config(cfg);
  std::vector<torch::Tensor> tiles;
  opts.on_images = [&](int id, const torch::Tensor& styled, const torch::Tensor& base) {
    const auto& p = pairs[static_cast<std::size_t>(id / opts.seeds_per_pair)];
    tiles.push_back(p.style);
    tiles.push_back(base);
    tiles.push_back(styled);
  };
  emit(log, "evaluating " + std::to_string(n_pairs) + " pairs x " + std::to_string(opts.seeds_per_pair) + " seeds");
  auto report = evaluate(frozen, net, pairs, opts);

  fs::create_directories(ws.logs());
  fs::create_directories(ws.samples());
  report.write_jsonl(ws.logs() / "eval.jsonl");
  write_png(ws.samples() / "eval_grid.png", grid_of(tiles, 12));

  auto results = report.summary();
  results["style_ratio"] = report.base_style_distance.mean > 0
                               ? report.style_distance.mean / report.base_style_distance.mean
                               : 0.0;
  RunManifest m{"eval", &cfg, {ws.autoencoder(), ws.base(), ws.branch(BranchKind::Style)}, {ws.logs() / "eval.jsonl"}};
  m.results = results;
  m.write(ws.runs() / "eval.json");
  return results;
}

}  // namespace controlstyle
