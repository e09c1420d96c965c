#pragma once

#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "blockvol/json_io.hpp"
#include "blockvol/store.hpp"

namespace blockvol {

/// Per-block function. Must be pure up to its declared output writes:
/// workers receive immutable Block descriptions and touch volumes only
/// through the store contract.
using BlockFn = std::function<void(const Block&)>;

/// Command line for a worker subprocess that speaks the newline-delimited
/// JSON worker protocol on stdin/stdout. Workers open their input/output
/// datasets themselves from paths passed on their command line.
struct ExternalWorkerSpec {
    std::vector<std::string> command;
    std::vector<std::pair<std::string, std::string>> env;
};

struct BlockTask {
    std::string name;
    BlockSpec block_spec;
    std::vector<VolumeHandle> inputs;
    std::vector<VolumeHandle> outputs;
    BlockFn worker;
    /// When set, blocks run in worker subprocesses regardless of context
    /// kind; `worker` is ignored.
    std::optional<ExternalWorkerSpec> external_worker;
    int max_retries = 2;
};

struct ExecutionContext {
    enum class Kind { serial, threads, processes };
    Kind kind = Kind::serial;
    int workers = 1;

    static ExecutionContext serial() { return {Kind::serial, 1}; }
    static ExecutionContext threads(int n) { return {Kind::threads, n}; }
    static ExecutionContext processes(int n) { return {Kind::processes, n}; }
};

struct BlockFailure {
    std::uint64_t block_index;
    std::string error;
};

struct RunReport {
    std::uint64_t total_blocks = 0;
    std::uint64_t succeeded = 0;
    std::uint64_t skipped = 0; // journaled as done on a previous run
    std::vector<BlockFailure> failed;
    double wall_seconds = 0;

    bool ok() const { return failed.empty(); }
};

struct Violation {
    std::uint64_t block_index;
    std::size_t output_index;
    std::size_t axis;
    std::string message;
};

/// Checks the store's concurrency contract: every output write ROI must
/// cover whole chunks (trailing partial chunks at the volume boundary are
/// fine, they have a single writer). Outputs with more dimensions than the
/// block grid (leading channel axes) are treated as fully covered on those
/// axes. Never throws; an empty result means the task may run in parallel.
std::vector<Violation> validate_task(const BlockTask& task);

/// Runs every block of the task under the given context. Failed blocks are
/// retried up to 1 + max_retries times and never abort the run. If a
/// journal path is given, indices of completed blocks are appended one per
/// line, and blocks already listed are skipped.
RunReport run_blockwise(const BlockTask& task, const ExecutionContext& ctx,
                        const std::optional<std::filesystem::path>& journal = {});

/// Runs stages strictly sequentially (blocks within a stage run
/// concurrently). A stage with failed blocks halts the pipeline; the
/// returned reports cover only the stages that ran.
std::vector<RunReport> run_pipeline(const std::vector<BlockTask>& stages, const ExecutionContext& ctx,
                                    const std::optional<std::filesystem::path>& journal_prefix = {});

/// Worker side of the protocol: reads block messages from `in`, runs `fn`,
/// replies with done messages on `out`, returns on shutdown or EOF. This is
/// the loop external worker processes run.
void run_worker_protocol(std::istream& in, std::ostream& out, const BlockFn& fn);

nlohmann::json run_report_to_json(const RunReport& report);

} // namespace blockvol
