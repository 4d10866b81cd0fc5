#include "cli_io.hpp"

#include "cbav/avatar.hpp"
#include "cbav/checkpoint.hpp"
#include "cbav/config.hpp"
#include "cbav/errors.hpp"
#include "cbav/image_io.hpp"
#include "cbav/mesh_io.hpp"
#include "cbav/mesher.hpp"
#include "cbav/parallel.hpp"
#include "cbav/templates.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace cbav;

namespace {

struct Common {
  std::string template_name = "humanoid";
  int threads = 0;
  bool quiet = false;
};

struct Loaded {
  TemplateMesh tmpl;
  Model model;
};

Loaded load(const Common& c, const std::string& ckpt) {
  Loaded out;
  out.tmpl = make_template(c.template_name);
  out.model = load_checkpoint(ckpt, out.tmpl);
  return out;
}

Avatar load_avatar_for(const fs::path& path, const Loaded& l) {
  Avatar a = load_avatar(path);
  if (a.template_hash != l.model.template_hash) throw DataError(path.string() + ": avatar uses a different template");
  if (a.checkpoint_hash != decoder_hash(l.model.decoders))
    throw DataError(path.string() + ": avatar was made for different decoder weights");
  return a;
}

KindMask parse_kinds(const std::string& s) {
  if (s == "both") return KindMask::both();
  if (s == "geometry") return KindMask::geometry_only();
  if (s == "texture") return KindMask::texture_only();
  throw ConfigError("--kinds must be geometry, texture or both");
}

TrainConfig losses_from(const std::string& config_path) {
  return config_path.empty() ? TrainConfig::desk() : load_run_config(config_path).train;
}

std::vector<std::uint8_t> mask_from(const RgbImage& img) {
  std::vector<std::uint8_t> m(img.pixels.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = img.pixels[i].mean() > 0.5f ? 1 : 0;
  return m;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Codebook avatars: train, fit, edit and extract locally editable neural avatars"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--template", common.template_name, "Template mesh (humanoid or icosphere)");
  app.add_option("--threads", common.threads, "Worker threads (default: CBAV_THREADS or all cores)");
  app.add_flag("-q,--quiet", common.quiet, "Suppress progress messages");

  // synth
  auto* synth = app.add_subcommand("synth", "Write synthetic scans with pose sidecars");
  int synth_count = 8;
  std::uint64_t synth_seed = 0;
  double synth_amp = 0.01;
  std::string synth_out;
  synth->add_option("--count", synth_count, "Number of scans")->check(CLI::NonNegativeNumber);
  synth->add_option("--seed", synth_seed, "Base seed");
  synth->add_option("--amplitude", synth_amp, "Peak offset as a fraction of the bbox diagonal");
  synth->add_option("--out", synth_out, "Output directory")->required();

  // config
  auto* config_cmd = app.add_subcommand("config", "Print a complete config for a preset");
  std::string preset = "desk";
  config_cmd->add_option("--preset", preset, "desk or paper");

  // train
  auto* train = app.add_subcommand("train", "Train dictionaries and decoders");
  std::string train_config, train_scans, train_out, train_resume, train_csv;
  std::int64_t train_iters = -1;
  train->add_option("--config", train_config, "TOML run config")->required();
  train->add_option("--scans", train_scans, "Directory of scans")->required();
  train->add_option("--out", train_out, "Checkpoint path")->required();
  train->add_option("--resume", train_resume, "Continue from this checkpoint");
  train->add_option("--loss-csv", train_csv, "Loss trace (default: <out>.loss.csv)");
  train->add_option("--iterations", train_iters, "Stop after this many total iterations");

  // sample
  auto* sample = app.add_subcommand("sample", "Avatar from a dictionary row or a PCA sample");
  std::string ckpt, out;
  int sample_index = -1;
  std::uint64_t sample_seed = 0;
  sample->add_option("--ckpt", ckpt)->required();
  auto* idx_opt = sample->add_option("--index", sample_index, "Dictionary row");
  sample->add_option("--seed", sample_seed, "PCA sampling seed")->excludes(idx_opt);
  sample->add_option("--out", out, "Avatar file")->required();

  // fit
  auto* fit = app.add_subcommand("fit", "Fit a codebook to a scan with frozen decoders");
  std::string fit_scan, fit_pose, fit_config;
  FitOptions fit_opts;
  fit->add_option("--ckpt", ckpt)->required();
  fit->add_option("--scan", fit_scan, "Scan mesh")->required();
  fit->add_option("--pose", fit_pose, "Pose file (default: scan sidecar)");
  fit->add_option("--config", fit_config, "Run config supplying loss weights");
  fit->add_option("--geometry-iters", fit_opts.geometry_iterations);
  fit->add_option("--texture-iters", fit_opts.texture_iterations);
  fit->add_option("--points", fit_opts.points_per_iter);
  fit->add_option("--seed", fit_opts.seed);
  fit->add_option("--out", out)->required();

  // swap
  auto* swap = app.add_subcommand("swap", "Copy codebook rows of a vertex set from another avatar");
  std::string swap_dst, swap_src, swap_vertices, swap_kinds = "both";
  swap->add_option("--ckpt", ckpt)->required();
  swap->add_option("--dst", swap_dst)->required();
  swap->add_option("--src", swap_src)->required();
  swap->add_option("--vertices", swap_vertices, "Newline-delimited vertex indices")->required();
  swap->add_option("--kinds", swap_kinds, "geometry, texture or both");
  swap->add_option("--out", out)->required();

  // paint
  auto* paint = app.add_subcommand("paint", "Fine-tune texture features from an edited image");
  std::string paint_avatar, paint_image, paint_mask, paint_camera, paint_target, paint_config;
  PaintOptions paint_opts;
  paint->add_option("--ckpt", ckpt)->required();
  paint->add_option("--avatar", paint_avatar)->required();
  paint->add_option("--image", paint_image, "Edited PNG")->required();
  paint->add_option("--mask", paint_mask, "PNG, white where painted")->required();
  paint->add_option("--camera", paint_camera, "Camera JSON")->required();
  paint->add_option("--target", paint_target, "Mesh the image was rendered from")->required();
  paint->add_option("--config", paint_config, "Run config supplying the optimizer settings");
  paint->add_option("--iters", paint_opts.iterations);
  paint->add_option("--seed", paint_opts.seed);
  paint->add_option("--out", out)->required();

  // repose
  auto* repose_cmd = app.add_subcommand("repose", "Replace the pose of an avatar");
  std::string repose_avatar, repose_pose;
  repose_cmd->add_option("--ckpt", ckpt)->required();
  repose_cmd->add_option("--avatar", repose_avatar)->required();
  repose_cmd->add_option("--pose", repose_pose, "Pose JSON")->required();
  repose_cmd->add_option("--out", out)->required();

  // extract
  auto* extract = app.add_subcommand("extract", "Marching-cubes mesh with field colors");
  std::string extract_avatar;
  int extract_res = 64;
  extract->add_option("--ckpt", ckpt)->required();
  extract->add_option("--avatar", extract_avatar)->required();
  extract->add_option("--res", extract_res, "Cells per axis")->check(CLI::Range(2, 4096));
  extract->add_option("--out", out, "PLY or OBJ path")->required();

  // render
  auto* render = app.add_subcommand("render", "Ray-marched turntable PNGs");
  std::string render_avatar;
  int render_views = 4, render_res = 256, render_steps = 96;
  render->add_option("--ckpt", ckpt)->required();
  render->add_option("--avatar", render_avatar)->required();
  render->add_option("--views", render_views)->check(CLI::PositiveNumber);
  render->add_option("--res", render_res)->check(CLI::PositiveNumber);
  render->add_option("--steps", render_steps)->check(CLI::Range(2, 100000));
  render->add_option("--out", out, "Output directory")->required();

  // rasterize
  auto* raster_cmd = app.add_subcommand("rasterize", "Z-buffer render of a mesh (for painting)");
  std::string raster_mesh, raster_camera;
  raster_cmd->add_option("--mesh", raster_mesh)->required();
  raster_cmd->add_option("--camera", raster_camera, "Camera JSON")->required();
  raster_cmd->add_option("--out", out, "Color PNG")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    set_log_quiet(common.quiet);
    if (common.threads > 0) set_thread_count(common.threads);

    if (*synth) {
      const TemplateMesh tmpl = make_template(common.template_name);
      fs::create_directories(synth_out);
      std::mt19937_64 rng(synth_seed);
      for (int i = 0; i < synth_count; ++i) {
        const Scan s = synth_scan(tmpl, rng(), synth_amp);
        char name[32];
        std::snprintf(name, sizeof(name), "scan_%03d.ply", i);
        const fs::path p = fs::path(synth_out) / name;
        write_ply(s.mesh, p);
        cli::write_pose(s.pose, i, cli::pose_sidecar(p));
      }
      log_info("wrote " + std::to_string(synth_count) + " scans to " + synth_out);
    } else if (*config_cmd) {
      RunConfig rc;
      rc.preset = preset;
      rc.train = preset_config(preset);
      std::cout << format_run_config(rc);
    } else if (*train) {
      const RunConfig rc = load_run_config(train_config);
      const TemplateMesh tmpl = make_template(rc.template_name);
      std::vector<Scan> scans = cli::read_scan_dir(train_scans, tmpl);
      if (scans.empty()) throw DataError("no scans in " + train_scans);
      const int n = static_cast<int>(scans.size());
      std::unique_ptr<Trainer> trainer;
      if (train_resume.empty())
        trainer = std::make_unique<Trainer>(tmpl, std::move(scans), rc.train);
      else
        trainer = std::make_unique<Trainer>(tmpl, std::move(scans), rc.train, load_checkpoint(train_resume, tmpl));
      const std::string csv_path = train_csv.empty() ? train_out + ".loss.csv" : train_csv;
      std::ofstream csv(csv_path, train_resume.empty() ? std::ios::trunc : std::ios::app);
      if (!csv) throw DataError("cannot write " + csv_path);
      const std::int64_t total = train_iters >= 0 ? train_iters : rc.train.total_iterations(n);
      log_info("training " + std::to_string(n) + " subjects for " + std::to_string(total) + " iterations");
      trainer->run(total, [&](const Trainer& t) { save_checkpoint(t.snapshot(), train_out); }, &csv);
      save_checkpoint(trainer->snapshot(), train_out);
    } else if (*sample) {
      const Loaded l = load(common, ckpt);
      const Avatar a = sample_index >= 0 ? init_avatar(l.model, l.tmpl, sample_index)
                                         : init_avatar(l.model, l.tmpl, sample_seed);
      save_avatar(a, out);
    } else if (*fit) {
      const Loaded l = load(common, ckpt);
      Scan scan;
      scan.mesh = read_mesh(fit_scan);
      scan.pose = cli::read_pose(fit_pose.empty() ? cli::pose_sidecar(fit_scan) : fs::path(fit_pose));
      fit_opts.losses = losses_from(fit_config);
      const std::uint64_t before = decoder_hash(l.model.decoders);
      const Avatar a = fit_codebook(scan, l.tmpl, l.model, fit_opts);
      if (decoder_hash(l.model.decoders) != before) throw std::logic_error("decoders changed during fitting");
      save_avatar(a, out);
    } else if (*swap) {
      const Loaded l = load(common, ckpt);
      const Avatar dst = load_avatar_for(swap_dst, l);
      const Avatar src = load_avatar_for(swap_src, l);
      const std::vector<int> verts = read_vertex_set(swap_vertices, l.tmpl.num_vertices());
      save_avatar(transfer_region(dst, src, verts, parse_kinds(swap_kinds)), out);
    } else if (*paint) {
      const Loaded l = load(common, ckpt);
      const Avatar a = load_avatar_for(paint_avatar, l);
      PaintInput in;
      in.image = read_png(paint_image);
      const RgbImage mask = read_png(paint_mask);
      if (mask.width != in.image.width || mask.height != in.image.height)
        throw DataError("mask and image sizes differ");
      in.mask = mask_from(mask);
      in.camera = cli::read_camera(paint_camera);
      in.target = read_mesh(paint_target);
      paint_opts.losses = losses_from(paint_config);
      save_avatar(paint_texture(a, in, l.tmpl, l.model, paint_opts), out);
    } else if (*repose_cmd) {
      const Loaded l = load(common, ckpt);
      const Avatar a = load_avatar_for(repose_avatar, l);
      save_avatar(repose(a, cli::read_pose(repose_pose), l.tmpl), out);
    } else if (*extract) {
      const Loaded l = load(common, ckpt);
      const Avatar a = load_avatar_for(extract_avatar, l);
      const AvatarScene scene(a, l.tmpl, l.model.decoders);
      VoxelGrid grid = sample_grid(scene.field().sdf_batch_closure(), extraction_box(scene.posed()), extract_res);
      seal_boundary(grid);
      TemplateMesh mesh = marching_cubes(grid);
      if (mesh.num_faces() == 0) throw DataError("extracted surface is empty (no sign change in the grid)");
      color_and_export(mesh, scene.field(), out);
      log_info("wrote " + std::to_string(mesh.num_vertices()) + " vertices, " + std::to_string(mesh.num_faces()) +
               " faces" + (is_watertight(mesh) ? " (watertight)" : " (not watertight)"));
    } else if (*render) {
      const Loaded l = load(common, ckpt);
      const Avatar a = load_avatar_for(render_avatar, l);
      const AvatarScene scene(a, l.tmpl, l.model.decoders);
      const auto views = render_turntable(scene.field(), scene.posed(), render_views, render_res, 2.0, 0.96,
                                          render_steps);
      const auto paths = write_turntable(views, out, "view");
      log_info("wrote " + std::to_string(paths.size()) + " images to " + out);
    } else if (*raster_cmd) {
      const TemplateMesh mesh = read_mesh(raster_mesh);
      write_png(rasterize(mesh, cli::read_camera(raster_camera)).color, out);
    }
  } catch (const ConfigError& e) {
    std::cerr << "cbav: config error: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    std::cerr << "cbav: data error: " << e.what() << '\n';
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "cbav: numeric error: " << e.what() << '\n';
    return 4;
  } catch (const std::invalid_argument& e) {
    std::cerr << "cbav: invalid input: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "cbav: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
