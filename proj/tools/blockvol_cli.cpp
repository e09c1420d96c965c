// blockvol command-line tool. Thin wrapper over the C API: configs do the
// describing, the library does the work.
#include <cstdio>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "blockvol.h"

namespace {

using nlohmann::json;

int exit_code_of(int rc) {
    if (rc == BV_OK) return 0;
    if (rc == BV_ERROR_PARTIAL) return 1;
    return 2;
}

void print_info(const json& info) {
    auto line = [](const char* label, const std::string& value) {
        std::printf("%-15s %s\n", label, value.c_str());
    };
    line("path:", info["path"].get<std::string>());
    line("dataset:", info["dataset"].get<std::string>());
    line("shape:", info["shape"].dump());
    line("chunks:", info["chunks"].dump());
    line("dtype:", info["dtype"].get<std::string>());
    line("compressor:", info["compressor"].get<std::string>());
    line("fill_value:", info["fill_value"].dump());
    line("voxel_size:", info["voxel_size"].dump());
    line("offset:", info["offset"].dump());
    if (info.contains("axes")) line("axes:", info["axes"].dump());
    line("chunks present:", info["chunks_present"].dump() + " / " + info["chunks_total"].dump());
}

int cmd_info(const std::string& path, const std::string& dataset) {
    bv_dataset* ds = nullptr;
    int rc = bv_dataset_open(path.c_str(), dataset.c_str(), &ds);
    if (rc != BV_OK) {
        std::fprintf(stderr, "error: %s\n", bv_last_error());
        return exit_code_of(rc);
    }
    char* info_json = nullptr;
    rc = bv_dataset_info(ds, &info_json);
    if (rc == BV_OK) {
        print_info(json::parse(info_json));
        bv_string_free(info_json);
    } else {
        std::fprintf(stderr, "error: %s\n", bv_last_error());
    }
    bv_dataset_close(ds);
    return exit_code_of(rc);
}

void print_record_summary(const std::string& command, const json& record) {
    const auto& reports = record["reports"];
    for (std::size_t i = 0; i < reports.size(); ++i) {
        const auto& r = reports[i];
        std::printf("stage %zu: %s blocks, %s ok, %s skipped, %zu failed (%.2fs)\n", i + 1,
                    r["total_blocks"].dump().c_str(), r["succeeded"].dump().c_str(),
                    r["skipped"].dump().c_str(), r["failed"].size(),
                    r["wall_seconds"].get<double>());
        for (const auto& f : r["failed"])
            std::fprintf(stderr, "  block %s failed: %s\n", f["block_index"].dump().c_str(),
                         f["error"].get<std::string>().c_str());
    }
    if (record.contains("object_count"))
        std::printf("objects: %s\n", record["object_count"].dump().c_str());
    if (command == "evaluate") std::printf("%s\n", record["scores"].dump(2).c_str());
    if (command == "sweep") {
        std::printf("%s\n", record["best"].dump(2).c_str());
        std::printf("score table: %s\n", record["score_table"].get<std::string>().c_str());
    }
    for (const auto& artifact : record["artifacts"])
        std::printf("wrote: %s\n", artifact.get<std::string>().c_str());
}

int cmd_run(const std::string& command, const std::string& config, std::optional<int> workers,
            const std::string& journal) {
    json overrides = json::object();
    if (workers) overrides["workers"] = *workers;
    if (!journal.empty()) overrides["journal"] = journal;
    std::string overrides_text = overrides.dump();

    char* record_json = nullptr;
    int rc = bv_run(command.c_str(), config.c_str(), overrides_text.c_str(), &record_json);
    if (rc == BV_OK || rc == BV_ERROR_PARTIAL) {
        print_record_summary(command, json::parse(record_json));
        bv_string_free(record_json);
        if (rc == BV_ERROR_PARTIAL)
            std::fprintf(stderr, "error: %s (exit 1)\n", bv_last_error());
    } else {
        std::fprintf(stderr, "error [%s]: %s\n", command.c_str(), bv_last_error());
    }
    return exit_code_of(rc);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Blockwise prediction, post-processing and evaluation of chunked volumes"};
    app.set_version_flag("--version", std::string("blockvol ") + bv_version());
    app.require_subcommand(1);

    std::string info_path, info_dataset;
    auto* info = app.add_subcommand("info", "Print a dataset summary");
    info->add_option("path", info_path, "Container root directory")->required();
    info->add_option("dataset", info_dataset, "Dataset name within the root")->required();

    struct RunOpts {
        std::string config;
        std::optional<int> workers;
        std::string journal;
    };
    std::map<std::string, RunOpts> run_opts;
    const std::pair<const char*, const char*> commands[] = {
        {"target", "Encode training targets from a label volume, blockwise"},
        {"predict", "Apply a predictor over a volume with halo context"},
        {"segment", "Turn predictions into segmentations, blockwise"},
        {"evaluate", "Score a segmentation against ground truth"},
        {"sweep", "Sweep post-processing parameters over checkpoints"},
    };
    for (const auto& [name, help] : commands) {
        auto* sub = app.add_subcommand(name, help);
        auto& opts = run_opts[name];
        sub->add_option("--config", opts.config, "Run config (JSON)")->required();
        sub->add_option("--workers", opts.workers, "Worker count override");
        sub->add_option("--journal", opts.journal, "Journal file for resumable runs");
    }

    CLI11_PARSE(app, argc, argv);

    if (info->parsed()) return cmd_info(info_path, info_dataset);
    for (const auto& [name, opts] : run_opts)
        if (app.get_subcommand(name)->parsed())
            return cmd_run(name, opts.config, opts.workers, opts.journal);
    return 2;
}
