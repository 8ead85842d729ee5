// Command-line front end. Links only the C API of libpairedinv.
#include <cstdio>
#include <string>

#include "CLI11.hpp"
#include "pairedinv.h"

namespace {

struct Options {
    std::string config;
    std::string out_dir;
    std::string data_dir;
    std::string checkpoint;
    std::string input;
    std::string tensor;
    std::string seed;
    std::string sample;
    std::string threads;
};

void add_common(CLI::App* sub, Options& o) {
    sub->add_option("--config", o.config, "JSON run configuration");
    sub->add_option("--out", o.out_dir, "output directory");
    sub->add_option("--data", o.data_dir, "dataset directory (gen output root)");
    sub->add_option("--checkpoint", o.checkpoint, "model checkpoint (.pairinv)");
    sub->add_option("--seed", o.seed, "seed override");
    sub->add_option("--threads", o.threads, "worker cap (also PAIREDINV_THREADS)");
}

int run(const Options& o, const char* cmd) {
    pinv_ctx* ctx = pinv_ctx_open(o.config.empty() ? nullptr : o.config.c_str());
    if (!ctx) {
        std::fprintf(stderr, "error: %s\n", pinv_last_error());
        return PINV_ERR_CONFIG;
    }
    auto set = [&](const char* key, const std::string& v) {
        return v.empty() ? PINV_OK : pinv_ctx_set(ctx, key, v.c_str());
    };
    int rc = PINV_OK;
    if (rc == PINV_OK) rc = set("out_dir", o.out_dir);
    if (rc == PINV_OK) rc = set("data_dir", o.data_dir);
    if (rc == PINV_OK) rc = set("checkpoint", o.checkpoint);
    if (rc == PINV_OK) rc = set("input", o.input);
    if (rc == PINV_OK) rc = set("tensor", o.tensor);
    if (rc == PINV_OK) rc = set("seed", o.seed);
    if (rc == PINV_OK) rc = set("sample", o.sample);
    if (rc == PINV_OK) rc = set("threads", o.threads);
    if (rc == PINV_OK) rc = pinv_run(ctx, cmd);
    if (rc != PINV_OK) std::fprintf(stderr, "error: %s\n", pinv_last_error());
    pinv_ctx_close(ctx);
    return rc;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"paired-autoencoder inversion pipeline"};
    app.require_subcommand(1);
    Options o;

    const char* cmds[] = {"gen", "train", "infer", "invert", "suite", "ood", "bounds"};
    const char* descs[] = {"generate paired datasets",
                           "train the paired model",
                           "likelihood-free estimates with RRE/RMA",
                           "run one BI/LSI inversion job",
                           "run the four-configuration inversion suite",
                           "fit/apply the OOD density gate",
                           "emit the error-bound report"};
    for (int i = 0; i < 7; ++i) add_common(app.add_subcommand(cmds[i], descs[i]), o);

    CLI::App* invert = app.get_subcommand("invert");
    invert->add_option("--sample", o.sample, "test-split sample index");

    CLI::App* img = app.add_subcommand("img", "dump a 2D tensor as binary PGM");
    add_common(img, o);
    img->add_option("--input", o.input, "container file")->required();
    img->add_option("--tensor", o.tensor, "tensor name")->required();

    CLI11_PARSE(app, argc, argv);

    for (int i = 0; i < 7; ++i)
        if (app.get_subcommand(cmds[i])->parsed()) return run(o, cmds[i]);
    if (img->parsed()) return run(o, "img");
    return PINV_ERR_CONFIG;
}
