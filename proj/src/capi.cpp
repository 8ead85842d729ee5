#include "pairedinv.h"

#include <cstdlib>
#include <string>

#include "pipeline.hpp"

using namespace pinv;

struct pinv_ctx {
    RunConfig cfg;
    std::string out_dir = "out";
    std::string data_dir;
    std::string checkpoint;
    std::string input;   // container path for img
    std::string tensor;  // tensor name for img
    std::size_t sample = 0;
    int threads = 1;  // accepted for interface compatibility; jobs run serially
};

namespace {

thread_local std::string g_last_error;

void set_error(const std::string& msg) { g_last_error = msg; }

}  // namespace

extern "C" {

pinv_ctx* pinv_ctx_open(const char* config_path) {
    try {
        tune_allocator();
        auto* ctx = new pinv_ctx;
        if (config_path && *config_path) ctx->cfg = RunConfig::load(config_path);
        ctx->out_dir = ctx->cfg.paths.out_dir;
        ctx->data_dir = ctx->cfg.paths.data_dir;
        ctx->checkpoint = ctx->cfg.paths.checkpoint;
        if (const char* env = std::getenv("PAIREDINV_THREADS"))
            ctx->threads = std::max(1, std::atoi(env));
        return ctx;
    } catch (const std::exception& e) {
        set_error(e.what());
        return nullptr;
    }
}

void pinv_ctx_close(pinv_ctx* ctx) { delete ctx; }

int pinv_ctx_set(pinv_ctx* ctx, const char* key, const char* value) {
    if (!ctx || !key || !value) {
        set_error("pinv_ctx_set: null argument");
        return PINV_ERR_CONFIG;
    }
    const std::string k = key;
    try {
        if (k == "out_dir") ctx->out_dir = value;
        else if (k == "data_dir") ctx->data_dir = value;
        else if (k == "checkpoint") ctx->checkpoint = value;
        else if (k == "input") ctx->input = value;
        else if (k == "tensor") ctx->tensor = value;
        else if (k == "seed") ctx->cfg.seed = std::stoull(value);
        else if (k == "sample") ctx->sample = std::stoull(value);
        else if (k == "threads") ctx->threads = std::max(1, std::stoi(value));
        else {
            set_error("pinv_ctx_set: unknown key '" + k + "'");
            return PINV_ERR_CONFIG;
        }
    } catch (const std::exception& e) {
        set_error("pinv_ctx_set: bad value for '" + k + "': " + e.what());
        return PINV_ERR_CONFIG;
    }
    return PINV_OK;
}

int pinv_run(pinv_ctx* ctx, const char* subcommand) {
    if (!ctx || !subcommand) {
        set_error("pinv_run: null argument");
        return PINV_ERR_CONFIG;
    }
    const std::string cmd = subcommand;
    const std::string data = ctx->data_dir.empty() ? ctx->out_dir : ctx->data_dir;
    try {
        if (cmd == "gen") run_gen(ctx->cfg, ctx->out_dir);
        else if (cmd == "train") run_train(ctx->cfg, data, ctx->out_dir);
        else if (cmd == "infer") run_infer(ctx->cfg, ctx->checkpoint, data, ctx->out_dir);
        else if (cmd == "invert")
            run_invert(ctx->cfg, ctx->checkpoint, data, ctx->sample, ctx->out_dir);
        else if (cmd == "suite") run_suite(ctx->cfg, ctx->checkpoint, data, ctx->out_dir);
        else if (cmd == "ood") run_ood(ctx->cfg, ctx->checkpoint, data, ctx->out_dir);
        else if (cmd == "bounds") run_bounds(ctx->cfg, ctx->checkpoint, data, ctx->out_dir);
        else if (cmd == "img") {
            if (ctx->input.empty() || ctx->tensor.empty())
                throw ContractError("img: --input and --tensor are required");
            run_img(ctx->input, ctx->tensor,
                    (ctx->out_dir.empty() ? std::string("img.pgm")
                                          : ctx->out_dir + "/img.pgm"));
        } else {
            set_error("unknown subcommand '" + cmd + "'");
            return PINV_ERR_CONFIG;
        }
    } catch (const ContractError& e) {
        set_error(e.what());
        return PINV_ERR_CONFIG;
    } catch (const FormatError& e) {
        set_error(e.what());
        return PINV_ERR_CONFIG;
    } catch (const std::exception& e) {
        set_error(e.what());
        return PINV_ERR_RUNTIME;
    }
    return PINV_OK;
}

const char* pinv_last_error(void) { return g_last_error.c_str(); }

uint64_t pinv_solver_calls(void) { return SolverCounters::total(); }

void pinv_reset_solver_calls(void) { SolverCounters::reset(); }

const char* pinv_version(void) { return "pairedinv 1.0.0"; }

}  // extern "C"
