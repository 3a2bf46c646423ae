// duet: synthetic-corpus dual-encoder training and evaluation toolkit.
//
// Subcommands: generate, train, eval-retrieval, eval-bbox, eval-fgovd,
// grad-check, ovd-fuse. Every subcommand prints a JSON summary to stdout and
// exits nonzero on any library error.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "duet/checkpoint.hpp"
#include "duet/eval.hpp"
#include "duet/gradsuite.hpp"
#include "duet/region.hpp"
#include "duet/synthdata.hpp"
#include "duet/trainer.hpp"

using nlohmann::json;

namespace {

duet::TrainConfig load_train_config(const std::string& path) {
    duet::TrainConfig cfg;
    if (path.empty()) return cfg;
    std::ifstream in(path);
    if (!in) throw duet::IoError("cannot open config " + path);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw duet::IoError("config is not valid JSON: " + path);
    cfg.stage = j.value("stage", cfg.stage);
    cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
    cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
    cfg.beta1 = j.value("beta1", cfg.beta1);
    cfg.beta2 = j.value("beta2", cfg.beta2);
    cfg.adam_eps = j.value("adam_eps", cfg.adam_eps);
    cfg.warmup_steps = j.value("warmup_steps", cfg.warmup_steps);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.workers = j.value("workers", cfg.workers);
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.max_steps = j.value("max_steps", cfg.max_steps);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.threaded = j.value("threaded", cfg.threaded);
    if (j.contains("weights")) {
        const auto& w = j.at("weights");
        cfg.weights.global = w.value("global", cfg.weights.global);
        cfg.weights.fgv = w.value("fgv", cfg.weights.fgv);
        cfg.weights.fgt = w.value("fgt", cfg.weights.fgt);
        cfg.weights.cmr = w.value("cmr", cfg.weights.cmr);
        cfg.weights.tic = w.value("tic", cfg.weights.tic);
    }
    if (j.contains("model")) {
        const auto& m = j.at("model");
        cfg.model.embed_dim = m.value("embed_dim", cfg.model.embed_dim);
        cfg.model.dense_layers = m.value("dense_layers", cfg.model.dense_layers);
        cfg.model.vocab_size = m.value("vocab_size", cfg.model.vocab_size);
        cfg.model.image_positional = m.value("image_positional", cfg.model.image_positional);
        cfg.model.fgt_negatives = m.value("fgt_negatives", cfg.model.fgt_negatives);
        cfg.model.init_scale = m.value("init_scale", cfg.model.init_scale);
        cfg.model.t_prime_init = m.value("t_prime_init", cfg.model.t_prime_init);
        cfg.model.bias_init = m.value("bias_init", cfg.model.bias_init);
        cfg.model.tic_mean = m.value("tic_mean", cfg.model.tic_mean);
    }
    return cfg;
}

int cmd_generate(std::size_t samples, std::uint64_t seed, std::size_t regions, int bucket,
                 const std::string& out) {
    duet::GenConfig gc;
    gc.samples = samples;
    gc.seed = seed;
    gc.regions_per_image = regions;
    gc.bucket_side = bucket;
    duet::Corpus corpus = duet::generate_corpus(gc);
    duet::save_corpus(corpus, out);
    json j;
    j["samples"] = corpus.size();
    j["regions_per_image"] = regions;
    j["seed"] = seed;
    j["out"] = out;
    std::cout << j.dump() << "\n";
    return 0;
}

int cmd_train(int stage, const std::string& data, const std::string& config,
              const std::string& out, const std::string& resume, std::size_t workers,
              bool threaded) {
    duet::TrainConfig cfg = load_train_config(config);
    cfg.stage = stage;
    if (workers > 0) cfg.workers = workers;
    if (threaded) cfg.threaded = true;
    duet::Corpus corpus = duet::load_corpus(data);
    std::optional<duet::Model> init;
    if (!resume.empty()) init = duet::load_checkpoint(resume);
    if (cfg.stage == 2 && !init)
        throw duet::MissingCheckpointError("stage 2 requires --resume with a stage-1 checkpoint");
    duet::StageResult r = duet::run_stage(corpus, cfg, std::move(init), out);
    json j;
    j["stage"] = cfg.stage;
    j["steps"] = r.loss_trajectory.size();
    j["final_loss"] = r.loss_trajectory.empty() ? 0.0 : r.loss_trajectory.back();
    j["metrics"] = r.metrics_path;
    j["checkpoint"] = r.checkpoint_dir;
    std::cout << j.dump() << "\n";
    return 0;
}

int cmd_eval_retrieval(const std::string& ckpt, const std::string& data, bool use_long) {
    duet::Model model = duet::load_checkpoint(ckpt);
    duet::Corpus corpus = duet::load_corpus(data);
    duet::CorpusEmbeddings emb = duet::embed_corpus(model, corpus);
    duet::Tensor sims =
        duet::cosine_similarity_matrix(emb.img, use_long ? emb.long_txt : emb.short_txt);
    duet::RetrievalResult r = duet::retrieval_recalls(sims);
    json j;
    j["caption"] = use_long ? "long" : "short";
    j["samples"] = corpus.size();
    j["image_to_text"] = {{"r1", r.i2t_r1}, {"r5", r.i2t_r5}, {"r10", r.i2t_r10}};
    j["text_to_image"] = {{"r1", r.t2i_r1}, {"r5", r.t2i_r5}, {"r10", r.t2i_r10}};
    std::cout << j.dump() << "\n";
    return 0;
}

int cmd_eval_bbox(const std::string& ckpt, const std::string& data,
                  const std::string& classes_path) {
    duet::Model model = duet::load_checkpoint(ckpt);
    duet::Corpus corpus = duet::load_corpus(data);
    duet::RegionEvalData reg = duet::embed_regions(model, corpus);

    // class list: explicit file, or the distinct region phrases sorted
    std::vector<std::vector<int>> classes;
    if (!classes_path.empty()) {
        std::ifstream in(classes_path);
        if (!in) throw duet::IoError("cannot open " + classes_path);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            json j = json::parse(line, nullptr, false);
            if (j.is_discarded() || !j.contains("tokens"))
                throw duet::ParseError(lineno, "expected {\"tokens\": [ids]}");
            classes.push_back(j.at("tokens").get<std::vector<int>>());
        }
    } else {
        std::set<std::vector<int>> distinct(reg.phrases.begin(), reg.phrases.end());
        classes.assign(distinct.begin(), distinct.end());
    }

    duet::TextEncoderParams tp = duet::text_params_from(model.params());
    std::size_t d = model.config().embed_dim;
    duet::Tensor class_embs({classes.size(), d});
    std::map<std::vector<int>, std::size_t> index;
    for (std::size_t c = 0; c < classes.size(); ++c) {
        index[classes[c]] = c;
        duet::Tensor e = duet::l2_normalize(duet::encode_text(classes[c], tp));
        for (std::size_t k = 0; k < d; ++k) class_embs.at(c, k) = e[k];
    }

    duet::Tensor region_embs({reg.region_embs.size(), d});
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < reg.region_embs.size(); ++i) {
        auto it = index.find(reg.phrases[i]);
        if (it == index.end())
            throw duet::BadLabelError("region phrase missing from the class list");
        labels.push_back(it->second);
        for (std::size_t k = 0; k < d; ++k) region_embs.at(i, k) = reg.region_embs[i][k];
    }
    double acc = duet::bbox_classification_top1(region_embs, class_embs, labels);
    json j;
    j["regions"] = labels.size();
    j["classes"] = classes.size();
    j["top1"] = acc;
    std::cout << j.dump() << "\n";
    return 0;
}

int cmd_eval_fgovd(const std::string& ckpt, const std::string& data) {
    duet::Model model = duet::load_checkpoint(ckpt);
    duet::Corpus corpus = duet::load_corpus(data);
    duet::RegionEvalData reg = duet::embed_regions(model, corpus);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < reg.region_embs.size(); ++i)
        hits += duet::candidate_match_top1(reg.region_embs[i], reg.candidates[i]) ? 1 : 0;
    json j;
    j["regions"] = reg.region_embs.size();
    j["top1"] = reg.region_embs.empty()
                    ? 0.0
                    : static_cast<double>(hits) / static_cast<double>(reg.region_embs.size());
    std::cout << j.dump() << "\n";
    return 0;
}

int cmd_grad_check(std::uint64_t seed) {
    duet::GradSuiteResult r = duet::run_grad_suite(seed);
    json j;
    j["global"] = r.global;
    j["fgv"] = r.fgv;
    j["fgt"] = r.fgt;
    j["cmr"] = r.cmr;
    j["tic"] = r.tic;
    j["total"] = r.total;
    j["worst"] = r.worst();
    j["threshold"] = 1e-4;
    j["pass"] = r.worst() < 1e-4;
    std::cout << j.dump() << "\n";
    return r.worst() < 1e-4 ? 0 : 1;
}

int cmd_ovd_fuse(const std::string& in_path, const std::string& out_path, double alpha,
                 double scale) {
    std::ifstream in(in_path);
    if (!in) throw duet::IoError("cannot open " + in_path);
    std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
    if (!out) throw duet::IoError("cannot write " + out_path);
    std::string line;
    std::size_t lineno = 0, boxes = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded()) throw duet::ParseError(lineno, "invalid JSON");
        for (const char* key : {"box", "confidences", "sims"})
            if (!j.contains(key))
                throw duet::ParseError(lineno, std::string("missing \"") + key + "\"");
        auto box = j.at("box").get<std::vector<double>>();
        auto conf = j.at("confidences").get<std::vector<double>>();
        auto sims = j.at("sims").get<std::vector<double>>();
        if (box.size() != 4) throw duet::ParseError(lineno, "\"box\" must be [x1,y1,x2,y2]");
        if (conf.size() != sims.size())
            throw duet::ParseError(lineno, "confidences and sims lengths differ");
        duet::FusedScores fused =
            duet::ovd_fuse(duet::Tensor::row(conf), duet::Tensor::row(sims), alpha, scale);
        duet::Detection det{duet::Box{box[0], box[1], box[2], box[3]},
                            fused.fused[fused.argmax], fused.argmax};
        det.box.validate();
        json o;
        o["box"] = {det.box.x1, det.box.y1, det.box.x2, det.box.y2};
        o["fused"] = fused.fused.values();
        o["argmax"] = det.category;
        o["confidence"] = det.confidence;
        out << o.dump() << "\n";
        ++boxes;
    }
    json j;
    j["boxes"] = boxes;
    j["alpha"] = alpha;
    j["scale"] = scale;
    j["out"] = out_path;
    std::cout << j.dump() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dual-encoder alignment trainer on a synthetic region-text corpus"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("generate", "write a synthetic JSON-lines corpus");
    std::size_t g_samples = 32, g_regions = 2;
    std::uint64_t g_seed = 0;
    int g_bucket = 128;
    std::string g_out;
    gen->add_option("--samples", g_samples, "number of samples");
    gen->add_option("--seed", g_seed, "generator seed");
    gen->add_option("--regions", g_regions, "regions per image");
    gen->add_option("--bucket", g_bucket, "resolution bucket side");
    gen->add_option("--out", g_out, "output path")->required();

    auto* train = app.add_subcommand("train", "run one optimization stage");
    int t_stage = 1;
    std::string t_data, t_config, t_out, t_resume;
    std::size_t t_workers = 0;
    bool t_threaded = false;
    train->add_option("--stage", t_stage, "1 or 2")->required();
    train->add_option("--data", t_data, "corpus path")->required();
    train->add_option("--config", t_config, "JSON training config");
    train->add_option("--out", t_out, "output directory")->required();
    train->add_option("--resume", t_resume, "checkpoint to start from");
    train->add_option("--workers", t_workers, "simulated data-parallel workers");
    train->add_flag("--threads", t_threaded, "run workers on real threads");

    auto* evr = app.add_subcommand("eval-retrieval", "image-text retrieval recalls");
    std::string r_ckpt, r_data;
    bool r_long = false, r_short = false;
    evr->add_option("--ckpt", r_ckpt)->required();
    evr->add_option("--data", r_data)->required();
    evr->add_flag("--long", r_long, "use long captions");
    evr->add_flag("--short", r_short, "use short captions (default)");

    auto* evb = app.add_subcommand("eval-bbox", "zero-shot bounding-box classification");
    std::string b_ckpt, b_data, b_classes;
    evb->add_option("--ckpt", b_ckpt)->required();
    evb->add_option("--data", b_data)->required();
    evb->add_option("--classes", b_classes, "JSON-lines class token file");

    auto* evf = app.add_subcommand("eval-fgovd", "1-positive-vs-10-distractor region matching");
    std::string f_ckpt, f_data;
    evf->add_option("--ckpt", f_ckpt)->required();
    evf->add_option("--data", f_data)->required();

    auto* gch = app.add_subcommand("grad-check", "finite-difference gradient suite");
    std::uint64_t c_seed = 0;
    gch->add_option("--seed", c_seed);

    auto* fuse = app.add_subcommand("ovd-fuse", "detector/similarity score fusion");
    std::string u_in, u_out;
    double u_alpha = 0.5, u_scale = 10.0;
    fuse->add_option("--in", u_in)->required();
    fuse->add_option("--out", u_out)->required();
    fuse->add_option("--alpha", u_alpha, "detector weight in [0,1]");
    fuse->add_option("--scale", u_scale, "softmax scale over similarities");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_generate(g_samples, g_seed, g_regions, g_bucket, g_out);
        if (train->parsed())
            return cmd_train(t_stage, t_data, t_config, t_out, t_resume, t_workers, t_threaded);
        if (evr->parsed()) return cmd_eval_retrieval(r_ckpt, r_data, r_long && !r_short);
        if (evb->parsed()) return cmd_eval_bbox(b_ckpt, b_data, b_classes);
        if (evf->parsed()) return cmd_eval_fgovd(f_ckpt, f_data);
        if (gch->parsed()) return cmd_grad_check(c_seed);
        if (fuse->parsed()) return cmd_ovd_fuse(u_in, u_out, u_alpha, u_scale);
    } catch (const duet::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
