// uvga command line: dataset generation, training, reconstruction,
// refinement, animation, benchmarking and diagnostics for UV-anchored
// Gaussian head avatars. All stdout logs are key=value lines.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "uvga/gradcheck.hpp"
#include "uvga/losses.hpp"
#include "uvga/pipeline.hpp"

using namespace uvga;
namespace fs = std::filesystem;

namespace {

rig::HeadRig load_or_make_rig(const std::string& rig_path, std::uint64_t rig_seed) {
    if (!rig_path.empty()) return rig::load_rig(rig_path);
    rig::ProceduralRigOptions opt;
    opt.seed = rig_seed;
    return rig::make_procedural_rig(opt);
}

pipe::System make_system_from(const std::string& rig_path, std::uint64_t rig_seed,
                              const recon::ReconConfig& rc, const dyn::UNetConfig& uc) {
    return pipe::System(load_or_make_rig(rig_path, rig_seed), rc, uc);
}

ParamStore<float> fresh_store(const pipe::System& sys, std::uint64_t seed) {
    ParamStore<float> ps;
    Rng rng(seed);
    sys.model.init_params(ps, rng);
    sys.dynamic.init_params(ps, rng);
    return ps;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(item);
    return out;
}

Tensor<float> load_image_rgb(const std::string& path, int expect) {
    const auto im = img::read_png(path);
    if (im.channels != 3) throw std::runtime_error("image must be RGB: " + path);
    if (im.width != expect || im.height != expect)
        throw std::runtime_error("image must be " + std::to_string(expect) + "px square: " + path);
    return img::to_frame<float>(im);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"UV-anchored Gaussian head avatars"};
    app.require_subcommand(1);

    std::string rig_path;
    std::uint64_t rig_seed = 0x0badc0de;
    std::string config_path;
    app.add_option("--rig", rig_path, "rig container file (default: procedural rig)");
    app.add_option("--rig-seed", rig_seed, "procedural rig seed");
    app.add_option("--config", config_path, "key=value config file; keys override flags");

    // ---- datagen ----
    auto* cmd_datagen = app.add_subcommand("datagen", "generate a synthetic dataset");
    data::DatasetOptions dopt;
    std::string dg_out;
    int dg_uv = 64;
    cmd_datagen->add_option("--out", dg_out, "output directory")->required();
    cmd_datagen->add_option("--ids", dopt.n_ids, "identity count");
    cmd_datagen->add_option("--exprs", dopt.n_expr, "expressions per identity");
    cmd_datagen->add_option("--views", dopt.n_views, "viewpoints per identity");
    cmd_datagen->add_option("--size", dopt.image_size, "image size (px)");
    cmd_datagen->add_option("--seed", dopt.seed, "dataset seed");
    cmd_datagen->add_option("--uv", dg_uv, "uv binding resolution");

    // ---- train ----
    auto* cmd_train = app.add_subcommand("train", "train the full pipeline on a dataset");
    std::string tr_data, tr_out, tr_resume;
    pipe::TrainConfig tcfg;
    cmd_train->add_option("--data", tr_data, "dataset directory")->required();
    cmd_train->add_option("--out", tr_out, "output directory")->required();
    cmd_train->add_option("--steps", tcfg.steps, "gradient steps");
    cmd_train->add_option("--lr", tcfg.learning_rate, "Adam learning rate");
    cmd_train->add_option("--seed", tcfg.seed, "training seed");
    cmd_train->add_option("--supervision", tcfg.supervision_views, "supervision frames per step");
    cmd_train->add_option("--max-inputs", tcfg.max_input_images, "max input images per step");
    cmd_train->add_option("--checkpoint-every", tcfg.checkpoint_every, "checkpoint interval (0 = end only)");
    cmd_train->add_option("--resume", tr_resume, "checkpoint to resume from");
    cmd_train->add_flag_callback("--uniform-sampler", [&]() { tcfg.adjusted_sampler = false; },
                                 "disable the distribution-adjusted sampler");

    // ---- reconstruct ----
    auto* cmd_recon = app.add_subcommand("reconstruct", "feed-forward avatar from 1..N images");
    std::string rc_weights, rc_images, rc_masks, rc_out;
    cmd_recon->add_option("--weights", rc_weights, "trained checkpoint")->required();
    cmd_recon->add_option("--images", rc_images, "comma-separated input images (1..n_max)")->required();
    cmd_recon->add_option("--masks", rc_masks, "comma-separated foreground masks (optional)");
    cmd_recon->add_option("--out", rc_out, "output avatar asset")->required();

    // ---- refine ----
    auto* cmd_refine = app.add_subcommand("refine", "test-time refinement on the input views");
    std::string rf_asset, rf_weights, rf_data, rf_frames, rf_out;
    int rf_id = 0;
    pipe::RefineConfig rfc;
    cmd_refine->add_option("--asset", rf_asset, "input avatar asset")->required();
    cmd_refine->add_option("--weights", rf_weights, "checkpoint holding the reconstruction parameters")->required();
    cmd_refine->add_option("--data", rf_data, "dataset directory supplying views/cameras/expressions")->required();
    cmd_refine->add_option("--id", rf_id, "identity index in the dataset");
    cmd_refine->add_option("--frames", rf_frames, "input views as expr:view pairs, e.g. 0:1,3:2")->required();
    cmd_refine->add_option("--iters", rfc.iters, "refinement iterations");
    cmd_refine->add_option("--lr", rfc.learning_rate, "refinement learning rate");
    cmd_refine->add_option("--out", rf_out, "output avatar asset")->required();

    // ---- animate ----
    auto* cmd_anim = app.add_subcommand("animate", "drive an asset through an expression sequence");
    std::string an_asset, an_seq, an_cams, an_out;
    cmd_anim->add_option("--asset", an_asset, "avatar asset")->required();
    cmd_anim->add_option("--seq", an_seq, "expression sequence csv")->required();
    cmd_anim->add_option("--cams", an_cams, "camera path csv")->required();
    cmd_anim->add_option("--out", an_out, "output directory")->required();

    // ---- benchmark ----
    auto* cmd_bench = app.add_subcommand("benchmark", "per-stage drive-path timings");
    std::string bm_asset;
    int bm_frames = 50;
    std::uint64_t bm_seed = 17;
    cmd_bench->add_option("--asset", bm_asset, "avatar asset")->required();
    cmd_bench->add_option("--frames", bm_frames, "frames to time");
    cmd_bench->add_option("--seed", bm_seed, "expression sampling seed");

    // ---- gradcheck ----
    auto* cmd_grad = app.add_subcommand("gradcheck", "finite-difference verification of the op catalog");
    int gc_seeds = 10;
    double gc_eps = 1e-4, gc_tol = 1e-4;
    cmd_grad->add_option("--seeds", gc_seeds, "seeds per op");
    cmd_grad->add_option("--eps", gc_eps, "finite-difference epsilon");
    cmd_grad->add_option("--tol", gc_tol, "max relative error tolerance");

    // ---- pca-plot ----
    auto* cmd_pca = app.add_subcommand("pca-plot", "project an expression table onto its anchor PCA plane");
    std::string pc_table, pc_out;
    int pc_anchors = 20;
    cmd_pca->add_option("--table", pc_table, "expression table csv")->required();
    cmd_pca->add_option("--anchors", pc_anchors, "anchor count");
    cmd_pca->add_option("--out", pc_out, "output csv")->required();

    CLI11_PARSE(app, argc, argv);

    std::map<std::string, std::string> file_cfg;
    if (!config_path.empty()) file_cfg = pipe::read_config_file(config_path);

    try {
        if (*cmd_datagen) {
            const auto head = load_or_make_rig(rig_path, rig_seed);
            const auto binding = uvmap::bind_texels(head, dg_uv, dg_uv);
            const auto man = data::generate_dataset(head, binding, dopt, dg_out);
            data::save_expression_table(data::ExpressionTable::from_manifest(man), dg_out + "/table.csv");
            std::cout << "datagen out=" << dg_out << " frames=" << man.frames.size()
                      << " valid_texels=" << binding.valid_count() << "\n";
        } else if (*cmd_train) {
            recon::ReconConfig rc = pipe::desk_recon_config();
            dyn::UNetConfig uc = pipe::desk_unet_config();
            pipe::apply_model_config(rc, uc, file_cfg);
            pipe::apply_config(tcfg, file_cfg);  // config file overrides flags
            auto sys = make_system_from(rig_path, rig_seed, rc, uc);
            const auto man = data::load_manifest(tr_data, sys.head);
            if (man.opts.image_size != rc.image_size)
                throw std::runtime_error("dataset image size " + std::to_string(man.opts.image_size) +
                                         " != model image size " + std::to_string(rc.image_size));
            auto store = fresh_store(sys, tcfg.seed);
            if (!tr_resume.empty()) load_checkpoint(store, tr_resume);
            const auto t0 = std::chrono::steady_clock::now();
            const auto res = pipe::train(sys, store, man, tcfg, tr_out);
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            if (!res.history.empty())
                std::cout << "train steps=" << res.history.size() << " first_total=" << res.history.front().total
                          << " last_total=" << res.history.back().total << " wall_s=" << secs << "\n";
            std::cout << "train checkpoint=" << res.final_checkpoint << " loss_csv=" << tr_out + "/loss.csv"
                      << "\n";
        } else if (*cmd_recon) {
            recon::ReconConfig rc = pipe::desk_recon_config();
            dyn::UNetConfig uc = pipe::desk_unet_config();
            pipe::apply_model_config(rc, uc, file_cfg);
            auto sys = make_system_from(rig_path, rig_seed, rc, uc);
            auto store = fresh_store(sys, 0);
            load_checkpoint(store, rc_weights);
            const auto paths = split_list(rc_images);
            const auto mask_paths = rc_masks.empty() ? std::vector<std::string>{} : split_list(rc_masks);
            if (!mask_paths.empty() && mask_paths.size() != paths.size())
                throw std::runtime_error("mask count must match image count");
            std::vector<Tensor<float>> images;
            for (size_t i = 0; i < paths.size(); ++i) {
                auto im = load_image_rgb(paths[i], rc.image_size);
                if (!mask_paths.empty()) {
                    const auto mk = img::to_frame<float>(img::read_png(mask_paths[i]));
                    const std::int64_t plane = static_cast<std::int64_t>(rc.image_size) * rc.image_size;
                    for (int c = 0; c < 3; ++c)
                        for (std::int64_t p = 0; p < plane; ++p) im[c * plane + p] *= mk[p];
                }
                images.push_back(std::move(im));
            }
            const auto t0 = std::chrono::steady_clock::now();
            const auto asset = pipe::reconstruct_asset(sys, store, images);
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            pipe::save_asset(asset, rc_out);
            std::cout << "reconstruct images=" << images.size() << " encode_s=" << secs << " asset=" << rc_out
                      << "\n";
        } else if (*cmd_refine) {
            auto asset = pipe::load_asset(rf_asset);
            auto sys = make_system_from(rig_path, rig_seed, asset.recon_cfg, asset.unet_cfg);
            if (sys.head.content_hash() != asset.rig_hash)
                throw std::runtime_error("refine: asset was built against a different rig");
            auto store = fresh_store(sys, 0);
            load_checkpoint(store, rf_weights);
            const auto man = data::load_manifest(rf_data, sys.head);
            pipe::FrameStore frames(man);
            std::vector<pipe::RefineView> views;
            for (const auto& pair : split_list(rf_frames)) {
                const auto colon = pair.find(':');
                if (colon == std::string::npos) throw std::runtime_error("frames must be expr:view pairs");
                const int e = std::stoi(pair.substr(0, colon));
                const int v = std::stoi(pair.substr(colon + 1));
                pipe::RefineView rv;
                rv.image = frames.image(rf_id, e, v);
                rv.masked_image = frames.masked_image(rf_id, e, v);
                rv.expr = man.expression(rf_id, e);
                rv.camera = man.cameras[static_cast<size_t>(man.frame(rf_id, e, v).camera_index)];
                views.push_back(std::move(rv));
            }
            pipe::RefineReport report;
            const auto refined = pipe::refine(sys, store, asset, views, rfc, &report);
            pipe::save_asset(refined, rf_out);
            std::cout << "refine iters=" << report.iters << " l1_before=" << report.l1_before
                      << " l1_after=" << report.l1_after << " wall_s=" << report.wall_s << " asset=" << rf_out
                      << "\n";
        } else if (*cmd_anim) {
            const auto asset = pipe::load_asset(an_asset);
            auto sys = make_system_from(rig_path, rig_seed, asset.recon_cfg, asset.unet_cfg);
            if (sys.head.content_hash() != asset.rig_hash)
                throw std::runtime_error("animate: asset was built against a different rig");
            const auto seq = data::load_expression_sequence(an_seq, sys.head);
            const auto cams = data::load_cameras_csv(an_cams);
            const auto res = pipe::animate(sys, asset, seq, cams, {0, 0, 0}, an_out);
            double total = 0;
            for (const auto& t : res.per_frame)
                total += t.driving_ms + t.unet_ms + t.lbs_ms + t.project_ms + t.sort_ms + t.composite_ms;
            std::cout << "animate frames=" << res.frame_paths.size() << " out=" << an_out
                      << " mean_drive_ms=" << total / res.frame_paths.size() << "\n";
        } else if (*cmd_bench) {
            const auto asset = pipe::load_asset(bm_asset);
            auto sys = make_system_from(rig_path, rig_seed, asset.recon_cfg, asset.unet_cfg);
            const auto rep = pipe::benchmark(sys, asset, bm_frames, bm_seed);
            pipe::print_benchmark(rep, std::cout);
        } else if (*cmd_grad) {
            auto cases = substrate_gradcheck_catalog(20240901ULL);
            const auto loss_cases = loss::loss_gradcheck_cases();
            cases.insert(cases.end(), loss_cases.begin(), loss_cases.end());
            bool ok = true;
            std::cout << "op,max_rel_err,tolerance\n";
            for (const auto& c : cases) {
                double worst = 0;
                for (int s = 0; s < gc_seeds; ++s) {
                    Rng rng(20240901ULL + 1000003ULL * static_cast<std::uint64_t>(s));
                    worst = std::max(worst, grad_check(c.build, c.make_inputs(rng), gc_eps));
                }
                std::cout << c.name << "," << worst << "," << gc_tol << "\n";
                ok = ok && worst < gc_tol;
            }
            std::cout << "gradcheck ok=" << (ok ? 1 : 0) << "\n";
            return ok ? 0 : 1;
        } else if (*cmd_pca) {
            const auto table = data::load_expression_table(pc_table);
            const auto anchors = data::select_anchors(table, pc_anchors);
            const auto proj = data::pca_project(table, anchors);
            std::ofstream os(pc_out);
            os << "kind,identity,frame,x,y\n";
            for (size_t i = 0; i < table.rows.size(); ++i)
                os << "row," << table.rows[i].identity << "," << table.rows[i].frame << "," << proj.rows[i][0]
                   << "," << proj.rows[i][1] << "\n";
            for (size_t a = 0; a < proj.anchors.size(); ++a)
                os << "anchor,-1," << a << "," << proj.anchors[a][0] << "," << proj.anchors[a][1] << "\n";
            std::cout << "pca-plot rows=" << table.rows.size() << " anchors=" << anchors.size()
                      << " out=" << pc_out << "\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error=\"" << e.what() << "\"\n";
        return 1;
    }
    return 0;
}
