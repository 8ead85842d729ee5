#pragma once

#include <string>

#include "config.hpp"

namespace pinv {

// End-to-end jobs behind the CLI subcommands. All jobs are deterministic in
// (config, seed): reruns produce byte-identical CSV outputs.
void run_gen(const RunConfig& cfg, const std::string& out_dir);
void run_train(const RunConfig& cfg, const std::string& data_dir, const std::string& out_dir);
void run_infer(const RunConfig& cfg, const std::string& checkpoint, const std::string& data_dir,
               const std::string& out_dir);
void run_invert(const RunConfig& cfg, const std::string& checkpoint, const std::string& data_dir,
                std::size_t sample, const std::string& out_dir);
void run_suite(const RunConfig& cfg, const std::string& checkpoint, const std::string& data_dir,
               const std::string& out_dir);
void run_ood(const RunConfig& cfg, const std::string& checkpoint, const std::string& data_dir,
             const std::string& out_dir);
void run_bounds(const RunConfig& cfg, const std::string& checkpoint, const std::string& data_dir,
                const std::string& out_dir);
void run_img(const std::string& container_path, const std::string& tensor_name,
             const std::string& out_path);

// Shortest-round-trip formatting shared by every CSV writer.
std::string fmt_g17(double v);

}  // namespace pinv
