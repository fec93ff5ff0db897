#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "controlstyle/config.hpp"
#include "controlstyle/image.hpp"
#include "controlstyle/pipeline.hpp"
#include "controlstyle/regularizers.hpp"
#include "controlstyle/sampler.hpp"

using namespace controlstyle;

namespace {

struct Globals {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string work;
};

Config load_config(const Globals& g) {
  Config cfg = g.config_path.empty() ? Config() : Config::load(g.config_path);
  for (const auto& o : g.overrides) cfg.apply_override(o);
  if (!g.work.empty()) cfg.set("work_dir", g.work);
  return cfg;
}

void log_line(const std::string& msg) { std::cerr << msg << std::endl; }

void write_output(const fs::path& out, const torch::Tensor& image, RunManifest manifest) {
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_png(out, from_tensor(image));
  manifest.outputs.push_back(out);
  manifest.write(fs::path(out.string() + ".manifest.json"));
  std::cout << out.string() << '\n';
}

std::vector<int64_t> parse_blocks(const std::string& text) {
  Config c;
  c.set("blocks", text);
  return c.get_int_list("blocks", {});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Style-conditioned latent diffusion at desk scale"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "key = value config file");
  app.add_option("--set", g.overrides, "override a config entry, key=value (repeatable)");
  app.add_option("--work", g.work, "work directory (overrides work_dir)");

  auto* gen = app.add_subcommand("gen-data", "render scenes, styles and edge maps");
  auto* train_ae = app.add_subcommand("train-ae", "train the autoencoder");
  auto* train_base = app.add_subcommand("train-base", "train the text-to-image base model");
  auto* train_cs = app.add_subcommand("train-controlstyle", "train a modulation branch");
  std::string branch = "style";
  train_cs->add_option("--branch", branch, "style or edge")->check(CLI::IsMember({"style", "edge"}));

  auto* sample_cmd = app.add_subcommand("sample", "sample one image");
  std::string caption, style_path, edge_path, out = "sample.png";
  uint64_t seed = 0;
  double w_style = 1.0, w_edge = 1.0;
  sample_cmd->add_option("--caption", caption, "caption in the scene grammar")->required();
  sample_cmd->add_option("--style", style_path, "style image (PNG)");
  sample_cmd->add_option("--w-style", w_style, "style branch weight");
  sample_cmd->add_option("--seed", seed, "sampling seed");
  sample_cmd->add_option("--out", out, "output PNG");

  auto* fuse_cmd = app.add_subcommand("fuse", "sample with style and edge branches fused");
  fuse_cmd->add_option("--caption", caption, "caption in the scene grammar")->required();
  fuse_cmd->add_option("--style", style_path, "style image (PNG)")->required();
  fuse_cmd->add_option("--edge", edge_path, "edge map (PNG)")->required();
  fuse_cmd->add_option("--w-style", w_style, "style branch weight");
  fuse_cmd->add_option("--w-edge", w_edge, "edge branch weight");
  fuse_cmd->add_option("--seed", seed, "sampling seed");
  fuse_cmd->add_option("--out", out, "output PNG");

  auto* eval_cmd = app.add_subcommand("eval", "style distance and structure score on the eval set");

  auto* invert_cmd = app.add_subcommand("invert-style", "optimise a latent to match a style image's statistics");
  int inv_steps = 300, image_every = 0;
  double inv_lr = 0.05;
  std::string blocks = "1,2,3,4";
  invert_cmd->add_option("--style", style_path, "style image (PNG)")->required();
  invert_cmd->add_option("--steps", inv_steps, "optimisation steps");
  invert_cmd->add_option("--lr", inv_lr, "Adam learning rate");
  invert_cmd->add_option("--blocks", blocks, "decoder blocks, comma separated");
  invert_cmd->add_option("--seed", seed, "seed of the starting latent");
  invert_cmd->add_option("--out", out, "output PNG");
  invert_cmd->add_option("--image-every", image_every, "also write the decoded latent every N steps (0 = off)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    const Config cfg = load_config(g);
    torch::set_num_threads(static_cast<int>(cfg.get_int("threads", torch::get_num_threads())));
    const auto ws = Workspace::from_config(cfg);
    auto print = [](const nlohmann::json& j) { std::cout << j.dump(2) << '\n'; };

    if (*gen) {
      print(stage_gen_data(cfg, log_line));
    } else if (*train_ae) {
      print(stage_train_ae(cfg, log_line));
    } else if (*train_base) {
      print(stage_train_base(cfg, log_line));
    } else if (*train_cs) {
      print(stage_train_branch(cfg, parse_branch_kind(branch), log_line));
    } else if (*eval_cmd) {
      print(stage_eval(cfg, log_line));
    } else if (*sample_cmd || *fuse_cmd) {
      auto frozen = load_frozen(ws);
      RunManifest manifest{*fuse_cmd ? "fuse" : "sample", &cfg, {ws.autoencoder(), ws.base()}, {}};
      SampleRequest req;
      req.caption = caption;
      req.seed = seed;
      req.style_weight = w_style;
      std::optional<ModulationNetwork> style_net;
      if (!style_path.empty()) {
        req.style = load_image_tensor(style_path);
        style_net = load_branch(ws.branch(BranchKind::Style), frozen.unet->config(), BranchKind::Style);
        manifest.inputs.push_back(ws.branch(BranchKind::Style));
        manifest.inputs.push_back(style_path);
      }
      if (*fuse_cmd) {
        auto edge_net = load_branch(ws.branch(BranchKind::Edge), frozen.unet->config(), BranchKind::Edge);
        req.extra.push_back({edge_net, load_image_tensor(edge_path), w_edge});
        manifest.inputs.push_back(ws.branch(BranchKind::Edge));
        manifest.inputs.push_back(edge_path);
      }
      manifest.results = {{"caption", caption}, {"seed", seed}, {"w_style", w_style}};
      if (*fuse_cmd) manifest.results["w_edge"] = w_edge;
      auto image = sample(req, frozen, style_net ? &*style_net : nullptr);
      write_output(out, image, manifest);
    } else if (*invert_cmd) {
      auto ae = load_autoencoder(ws.autoencoder());
      for (auto& p : ae->parameters()) p.set_requires_grad(false);
      auto reg = RegConfig::from_config(cfg);
      reg.style_blocks = parse_blocks(blocks);
      auto style = load_image_tensor(style_path).unsqueeze(0);
      const auto& ac = ae->config();
      auto z0 = initial_noise(seed, ac.latent_channels, ac.latent_size()).unsqueeze(0);
      InversionOptions opts;
      opts.lr = inv_lr;
      std::ofstream curve(out + ".losses.jsonl");
      opts.on_step = [&](int step, double loss) {
        curve << nlohmann::json{{"step", step}, {"loss", loss}}.dump() << '\n';
      };
      opts.image_every = image_every;
      opts.on_image = [&](int step, const torch::Tensor& z) {
        torch::NoGradGuard ng;
        const fs::path p(out);
        char name[32];
        std::snprintf(name, sizeof name, "_step%05d.png", step);
        write_png(p.parent_path() / (p.stem().string() + name), from_tensor(ae->decode(z)[0]));
      };
      auto result = invert_style_latent(ae, z0, style, inv_steps, reg, opts);
      torch::Tensor image;
      {
        torch::NoGradGuard ng;
        image = ae->decode(result.latent)[0];
      }
      RunManifest manifest{"invert-style", &cfg, {ws.autoencoder(), style_path}, {}};
      manifest.results = {{"blocks", reg.style_blocks},
                          {"initial_loss", result.losses.front()},
                          {"final_loss", result.losses.back()},
                          {"diverged", result.diverged}};
      write_output(out, image, manifest);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
