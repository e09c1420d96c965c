#include "blockvol/scheduler.hpp"

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <csignal>
#include <cstring>
#include <deque>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>
#include <unordered_set>

#include <fcntl.h>
#include <poll.h>
#include <sys/wait.h>
#include <unistd.h>

namespace blockvol {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::int64_t floor_mod(std::int64_t a, std::int64_t b) {
    std::int64_t m = a % b;
    return m < 0 ? m + b : m;
}

struct Attempt {
    Block block;
    int tries = 0;
};

// ---------------------------------------------------------------------------
// Journal
// ---------------------------------------------------------------------------

std::unordered_set<std::uint64_t> read_journal(const fs::path& path, std::uint64_t total) {
    std::unordered_set<std::uint64_t> done;
    std::ifstream in(path);
    if (!in) return done;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::uint64_t idx = 0;
        try {
            idx = std::stoull(line);
        } catch (const std::exception&) {
            fail(Errc::io, "journal " + path.string() + ": unparseable line " + std::to_string(lineno));
        }
        if (idx >= total)
            fail(Errc::io, "journal " + path.string() + ": block index " + std::to_string(idx) +
                               " out of range for this task (" + std::to_string(total) + " blocks)");
        done.insert(idx);
    }
    return done;
}

class Journal {
public:
    explicit Journal(const std::optional<fs::path>& path) {
        if (!path) return;
        out_.open(*path, std::ios::app);
        if (!out_) fail(Errc::io, "journal unwritable: " + path->string());
    }

    void record(std::uint64_t block_index) {
        if (!out_.is_open()) return;
        out_ << block_index << "\n";
        out_.flush();
    }

private:
    std::ofstream out_;
};

// ---------------------------------------------------------------------------
// Protocol messages
// ---------------------------------------------------------------------------

std::string block_message(const Block& b) {
    json msg{{"type", "block"},
             {"block_index", b.block_index},
             {"read_roi", roi_to_json(b.read_roi)},
             {"write_roi", roi_to_json(b.write_roi)}};
    return msg.dump() + "\n";
}

/// Handles one protocol line on the worker side. Returns the reply to send,
/// or nothing for lines that need no reply; sets `shutdown` on a shutdown
/// message.
std::optional<std::string> handle_worker_line(const std::string& line, const BlockFn& fn,
                                              bool& shutdown) {
    if (line.empty()) return std::nullopt;
    json msg = json::parse(line, nullptr, false);
    if (msg.is_discarded()) return std::nullopt;
    std::string type = msg.value("type", "");
    if (type == "shutdown") {
        shutdown = true;
        return std::nullopt;
    }
    if (type != "block") return std::nullopt;

    std::uint64_t index = msg.value("block_index", std::uint64_t(0));
    json reply{{"type", "done"}, {"block_index", index}};
    try {
        Block block{index, roi_from_json(msg.at("read_roi"), "read_roi"),
                    roi_from_json(msg.at("write_roi"), "write_roi")};
        fn(block);
        reply["status"] = "ok";
    } catch (const std::exception& e) {
        reply["status"] = "error";
        reply["message"] = e.what();
    }
    return reply.dump() + "\n";
}

/// Worker protocol loop over raw fds. The forked built-in workers use this:
/// the C++ stream objects inherited from the orchestrator carry buffered
/// output that must not leak into the protocol stream.
void worker_protocol_fd(int in_fd, int out_fd, const BlockFn& fn) {
    std::string buf;
    char tmp[4096];
    auto write_all = [&](const std::string& s) {
        std::size_t off = 0;
        while (off < s.size()) {
            ssize_t n = ::write(out_fd, s.data() + off, s.size() - off);
            if (n < 0) {
                if (errno == EINTR) continue;
                return false;
            }
            off += static_cast<std::size_t>(n);
        }
        return true;
    };

    bool shutdown = false;
    while (!shutdown) {
        std::size_t pos;
        while ((pos = buf.find('\n')) == std::string::npos) {
            ssize_t n = ::read(in_fd, tmp, sizeof tmp);
            if (n < 0) {
                if (errno == EINTR) continue;
                return;
            }
            if (n == 0) return;
            buf.append(tmp, static_cast<std::size_t>(n));
        }
        std::string line = buf.substr(0, pos);
        buf.erase(0, pos + 1);
        if (auto reply = handle_worker_line(line, fn, shutdown))
            if (!write_all(*reply)) return;
    }
}

// ---------------------------------------------------------------------------
// Shared run accounting
// ---------------------------------------------------------------------------

struct RunState {
    RunReport report;
    Journal journal;
    int attempt_limit;

    RunState(std::uint64_t total, std::uint64_t skipped, const std::optional<fs::path>& journal_path,
             int max_retries)
        : journal(journal_path), attempt_limit(1 + std::max(0, max_retries)) {
        report.total_blocks = total;
        report.skipped = skipped;
    }

    // Returns true if the attempt should be retried.
    bool on_failure(Attempt& attempt, const std::string& message) {
        if (attempt.tries < attempt_limit) return true;
        report.failed.push_back({attempt.block.block_index, message});
        return false;
    }

    void on_success(const Block& block) {
        ++report.succeeded;
        journal.record(block.block_index);
    }
};

// ---------------------------------------------------------------------------
// Serial and threaded execution
// ---------------------------------------------------------------------------

void run_serial(const BlockTask& task, std::deque<Attempt> queue, RunState& state) {
    while (!queue.empty()) {
        Attempt attempt = std::move(queue.front());
        queue.pop_front();
        ++attempt.tries;
        try {
            task.worker(attempt.block);
            state.on_success(attempt.block);
        } catch (const std::exception& e) {
            if (state.on_failure(attempt, e.what())) queue.push_back(std::move(attempt));
        }
    }
}

void run_threads(const BlockTask& task, std::deque<Attempt> queue, RunState& state, int workers) {
    std::mutex mu;
    std::condition_variable cv;
    const std::uint64_t to_run = queue.size();
    std::uint64_t terminal = 0;
    bool finished = to_run == 0;

    auto loop = [&] {
        std::unique_lock lock(mu);
        while (true) {
            cv.wait(lock, [&] { return finished || !queue.empty(); });
            if (queue.empty()) {
                if (finished) return;
                continue;
            }
            Attempt attempt = std::move(queue.front());
            queue.pop_front();
            ++attempt.tries;
            lock.unlock();

            std::string error;
            bool ok = true;
            try {
                task.worker(attempt.block);
            } catch (const std::exception& e) {
                ok = false;
                error = e.what();
            }

            lock.lock();
            bool is_terminal = true;
            if (ok) {
                state.on_success(attempt.block);
            } else if (state.on_failure(attempt, error)) {
                queue.push_back(std::move(attempt));
                is_terminal = false;
                cv.notify_one();
            }
            if (is_terminal && ++terminal == to_run) {
                finished = true;
                cv.notify_all();
            }
        }
    };

    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int i = 0; i < workers; ++i) pool.emplace_back(loop);
    for (auto& t : pool) t.join();
}

// ---------------------------------------------------------------------------
// Process execution: forked built-in workers or exec'd external workers,
// both speaking the NDJSON protocol over stdin/stdout pipes.
// ---------------------------------------------------------------------------

struct ChildProc {
    pid_t pid = -1;
    int to_fd = -1;
    int from_fd = -1;
    std::string buf;
    std::optional<Attempt> in_flight;
    bool shutting_down = false;
    bool saw_eof = false;
};

class SigpipeGuard {
public:
    SigpipeGuard() { prev_ = std::signal(SIGPIPE, SIG_IGN); }
    ~SigpipeGuard() { std::signal(SIGPIPE, prev_); }

private:
    void (*prev_)(int);
};

void close_fd(int& fd) {
    if (fd >= 0) ::close(fd);
    fd = -1;
}

class ProcessPool {
public:
    ProcessPool(const BlockTask& task, int workers) : task_(task), target_(workers) {}

    ~ProcessPool() {
        for (auto& c : children_) terminate(c);
    }

    RunReport run(std::deque<Attempt> queue, RunState& state) {
        SigpipeGuard sigpipe;
        queue_ = std::move(queue);
        const std::uint64_t to_run = queue_.size();
        std::uint64_t terminal = 0;
        // Deaths before a block was ever dispatched do not consume retry
        // budget, so cap respawns independently.
        respawn_budget_ = to_run * static_cast<std::uint64_t>(state.attempt_limit) + 2u * target_ + 4;

        while (alive_count() < std::min<std::uint64_t>(target_, queue_.size())) spawn();

        while (terminal < to_run) {
            dispatch();
            poll_children();

            for (auto& c : children_) {
                if (c.pid < 0) continue;
                drain_lines(c, [&](const json& msg) { handle_message(c, msg, state, terminal); });
            }
            reap_dead(state, terminal);
        }
        shutdown_all();
        return state.report;
    }

private:
    std::uint64_t alive_count() const {
        std::uint64_t n = 0;
        for (const auto& c : children_)
            if (c.pid >= 0) ++n;
        return n;
    }

    void spawn() {
        if (respawn_budget_ == 0)
            fail(Errc::io, "task \"" + task_.name + "\": worker processes keep dying, giving up");
        --respawn_budget_;

        int to_pipe[2], from_pipe[2];
        if (::pipe(to_pipe) != 0 || ::pipe(from_pipe) != 0)
            fail(Errc::io, "failed to spawn worker process: pipe: " + std::string(std::strerror(errno)));

        int exec_err[2] = {-1, -1};
        const bool external = task_.external_worker.has_value();
        if (external && ::pipe2(exec_err, O_CLOEXEC) != 0)
            fail(Errc::io, "failed to spawn worker process: pipe2: " + std::string(std::strerror(errno)));

        pid_t pid = ::fork();
        if (pid < 0)
            fail(Errc::io, "failed to spawn worker process: fork: " + std::string(std::strerror(errno)));

        if (pid == 0) {
            // Child. Drop every fd inherited from the pool (siblings' pipes
            // included) so orchestrator-side closes are observable.
            for (const auto& c : children_) {
                if (c.to_fd >= 0) ::close(c.to_fd);
                if (c.from_fd >= 0) ::close(c.from_fd);
            }
            ::close(to_pipe[1]);
            ::close(from_pipe[0]);

            if (external) {
                ::dup2(to_pipe[0], STDIN_FILENO);
                ::dup2(from_pipe[1], STDOUT_FILENO);
                ::close(to_pipe[0]);
                ::close(from_pipe[1]);
                const auto& spec = *task_.external_worker;
                for (const auto& [k, v] : spec.env) ::setenv(k.c_str(), v.c_str(), 1);
                std::vector<char*> argv;
                argv.reserve(spec.command.size() + 1);
                for (const auto& arg : spec.command) argv.push_back(const_cast<char*>(arg.c_str()));
                argv.push_back(nullptr);
                ::execvp(argv[0], argv.data());
                int err = errno;
                [[maybe_unused]] auto n = ::write(exec_err[1], &err, sizeof err);
                ::_exit(127);
            }

            int status = 0;
            try {
                worker_protocol_fd(to_pipe[0], from_pipe[1], task_.worker);
            } catch (...) {
                status = 1;
            }
            ::_exit(status);
        }

        // Parent.
        ::close(to_pipe[0]);
        ::close(from_pipe[1]);
        int flags = ::fcntl(from_pipe[0], F_GETFL, 0);
        ::fcntl(from_pipe[0], F_SETFL, flags | O_NONBLOCK);
        if (external) {
            ::close(exec_err[1]);
            int err = 0;
            ssize_t n = ::read(exec_err[0], &err, sizeof err);
            ::close(exec_err[0]);
            if (n > 0) {
                ::close(to_pipe[1]);
                ::close(from_pipe[0]);
                int status;
                ::waitpid(pid, &status, 0);
                fail(Errc::io, "failed to spawn worker process: exec " +
                                   task_.external_worker->command[0] + ": " + std::strerror(err));
            }
        }

        ChildProc child;
        child.pid = pid;
        child.to_fd = to_pipe[1];
        child.from_fd = from_pipe[0];
        children_.push_back(child);
    }

    void dispatch() {
        for (auto& c : children_) {
            if (c.pid < 0 || c.in_flight || c.shutting_down) continue;
            if (queue_.empty()) {
                send(c, "{\"type\":\"shutdown\"}\n");
                c.shutting_down = true;
                close_fd(c.to_fd);
                continue;
            }
            Attempt attempt = std::move(queue_.front());
            queue_.pop_front();
            ++attempt.tries;
            if (!send(c, block_message(attempt.block))) {
                // Child is gone; the EOF path settles the attempt.
                --attempt.tries;
                queue_.push_front(std::move(attempt));
                continue;
            }
            c.in_flight = std::move(attempt);
        }
        // Replace dead children while work remains.
        while (!queue_.empty() && alive_count() < static_cast<std::uint64_t>(target_)) spawn();
    }

    bool send(ChildProc& c, const std::string& text) {
        std::size_t off = 0;
        while (off < text.size()) {
            ssize_t n = ::write(c.to_fd, text.data() + off, text.size() - off);
            if (n < 0) {
                if (errno == EINTR) continue;
                return false;
            }
            off += static_cast<std::size_t>(n);
        }
        return true;
    }

    void poll_children() {
        std::vector<pollfd> fds;
        for (auto& c : children_) {
            if (c.pid < 0) continue;
            fds.push_back({c.from_fd, POLLIN, 0});
        }
        if (fds.empty()) return;
        int rc = ::poll(fds.data(), fds.size(), 5000);
        if (rc < 0 && errno != EINTR)
            fail(Errc::io, "poll: " + std::string(std::strerror(errno)));
    }

    template <class Handler>
    void drain_lines(ChildProc& c, Handler&& handler) {
        char buf[4096];
        while (!c.saw_eof) {
            ssize_t n = ::read(c.from_fd, buf, sizeof buf);
            if (n < 0) {
                if (errno == EINTR) continue;
                break; // EAGAIN: nothing more right now
            }
            if (n == 0) {
                c.saw_eof = true;
                break;
            }
            c.buf.append(buf, static_cast<std::size_t>(n));
        }
        std::size_t pos;
        while ((pos = c.buf.find('\n')) != std::string::npos) {
            std::string line = c.buf.substr(0, pos);
            c.buf.erase(0, pos + 1);
            if (line.empty()) continue;
            json msg = json::parse(line, nullptr, false);
            if (msg.is_discarded()) {
                // A worker that corrupts the protocol stream cannot be
                // trusted with its in-flight block.
                ::kill(c.pid, SIGKILL);
                close_fd(c.to_fd);
                c.saw_eof = true;
                break;
            }
            handler(msg);
        }
    }

    void handle_message(ChildProc& c, const json& msg, RunState& state, std::uint64_t& terminal) {
        if (msg.value("type", "") != "done" || !c.in_flight) return;
        std::uint64_t idx = msg.value("block_index", std::uint64_t(0));
        if (idx != c.in_flight->block.block_index) return;

        Attempt attempt = std::move(*c.in_flight);
        c.in_flight.reset();
        if (msg.value("status", "") == "ok") {
            state.on_success(attempt.block);
            ++terminal;
        } else {
            std::string message = msg.value("message", "worker reported failure");
            if (state.on_failure(attempt, message))
                queue_.push_back(std::move(attempt));
            else
                ++terminal;
        }
    }

    void reap_dead(RunState& state, std::uint64_t& terminal) {
        for (auto& c : children_) {
            if (c.pid < 0 || !c.saw_eof) continue;
            close_fd(c.to_fd);
            close_fd(c.from_fd);
            int status = 0;
            ::waitpid(c.pid, &status, 0);
            c.pid = -1;
            if (c.in_flight) {
                Attempt attempt = std::move(*c.in_flight);
                c.in_flight.reset();
                if (state.on_failure(attempt, "worker process exited mid-block"))
                    queue_.push_back(std::move(attempt));
                else
                    ++terminal;
            }
        }
    }

    void shutdown_all() {
        for (auto& c : children_) {
            if (c.pid < 0) continue;
            if (!c.shutting_down) {
                send(c, "{\"type\":\"shutdown\"}\n");
                c.shutting_down = true;
            }
            close_fd(c.to_fd);
            int status = 0;
            ::waitpid(c.pid, &status, 0);
            close_fd(c.from_fd);
            c.pid = -1;
        }
    }

    void terminate(ChildProc& c) {
        if (c.pid < 0) return;
        close_fd(c.to_fd);
        ::kill(c.pid, SIGKILL);
        int status = 0;
        ::waitpid(c.pid, &status, 0);
        close_fd(c.from_fd);
        c.pid = -1;
    }

    const BlockTask& task_;
    int target_;
    std::deque<Attempt> queue_;
    std::vector<ChildProc> children_;
    std::uint64_t respawn_budget_ = 0;
};

} // namespace

std::vector<Violation> validate_task(const BlockTask& task) {
    std::vector<Violation> violations;
    std::vector<Block> blocks;
    try {
        blocks = enumerate_blocks(task.block_spec);
    } catch (const Error&) {
        return violations; // a malformed spec surfaces when the run starts
    }

    for (std::size_t out_idx = 0; out_idx < task.outputs.size(); ++out_idx) {
        const VolumeHandle& out = task.outputs[out_idx];
        const Coordinate& chunks = out.metadata.chunk_shape;
        const std::size_t spatial = task.block_spec.total_roi.ndim();
        if (out.ndim() < spatial) {
            violations.push_back({0, out_idx, 0,
                                  "output " + out.dataset + " has fewer dimensions than the block grid"});
            continue;
        }
        const std::size_t lead = out.ndim() - spatial; // leading channel axes, fully covered

        // Spatial clip: blocks only ever write inside total_roi and bounds.
        Roi spatial_bounds(Coordinate::zeros(spatial),
                           Coordinate(std::vector<std::int64_t>(out.metadata.shape.values().end() - spatial,
                                                                out.metadata.shape.values().end())));
        Roi total_clip = task.block_spec.total_roi.intersect(spatial_bounds);

        for (const Block& block : blocks) {
            Roi w = block.write_roi.intersect(total_clip);
            if (w.empty()) continue;
            for (std::size_t a = 0; a < spatial; ++a) {
                std::int64_t chunk = chunks[lead + a];
                std::int64_t begin = w.offset[a];
                std::int64_t end = begin + w.shape[a];
                bool begin_ok = floor_mod(begin, chunk) == 0 || begin == total_clip.offset[a];
                bool end_ok = floor_mod(end, chunk) == 0 || end == total_clip.end()[a];
                if (!begin_ok || !end_ok) {
                    violations.push_back(
                        {block.block_index, out_idx, a,
                         "block " + std::to_string(block.block_index) + " write roi " + w.to_string() +
                             " is not chunk-aligned on axis " + std::to_string(a) + " of output \"" +
                             out.dataset + "\" (chunks " + chunks.to_string() + ")"});
                }
            }
        }
    }
    return violations;
}

RunReport run_blockwise(const BlockTask& task, const ExecutionContext& ctx,
                        const std::optional<fs::path>& journal_path) {
    if (ctx.workers < 1) fail(Errc::config, "execution context needs at least one worker");

    const bool parallel = !(ctx.kind == ExecutionContext::Kind::serial ||
                            (ctx.kind == ExecutionContext::Kind::threads && ctx.workers == 1));
    if (parallel) {
        auto violations = validate_task(task);
        if (!violations.empty())
            fail(Errc::config, "task \"" + task.name + "\" cannot run in parallel: " +
                                   violations.front().message + " (" + std::to_string(violations.size()) +
                                   " violations; run serially or align write shape to chunks)");
    }

    auto blocks = enumerate_blocks(task.block_spec);
    const std::uint64_t total = blocks.size();

    std::unordered_set<std::uint64_t> done;
    if (journal_path) done = read_journal(*journal_path, total);

    std::deque<Attempt> queue;
    for (auto& b : blocks)
        if (!done.contains(b.block_index)) queue.push_back({std::move(b), 0});

    RunState state(total, done.size(), journal_path, task.max_retries);
    auto started = std::chrono::steady_clock::now();

    const bool external = task.external_worker.has_value();
    if (!external && !task.worker) fail(Errc::config, "task \"" + task.name + "\" has no worker");

    if (external || ctx.kind == ExecutionContext::Kind::processes) {
        ProcessPool pool(task, ctx.workers);
        pool.run(std::move(queue), state);
    } else if (ctx.kind == ExecutionContext::Kind::threads && ctx.workers > 1) {
        run_threads(task, std::move(queue), state, ctx.workers);
    } else {
        run_serial(task, std::move(queue), state);
    }

    state.report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return state.report;
}

std::vector<RunReport> run_pipeline(const std::vector<BlockTask>& stages, const ExecutionContext& ctx,
                                    const std::optional<fs::path>& journal_prefix) {
    std::vector<RunReport> reports;
    for (std::size_t i = 0; i < stages.size(); ++i) {
        std::optional<fs::path> journal;
        if (journal_prefix) journal = fs::path(journal_prefix->string() + ".stage" + std::to_string(i));
        reports.push_back(run_blockwise(stages[i], ctx, journal));
        if (!reports.back().ok()) break; // later stages would read incomplete data
    }
    return reports;
}

void run_worker_protocol(std::istream& in, std::ostream& out, const BlockFn& fn) {
    std::string line;
    bool shutdown = false;
    while (!shutdown && std::getline(in, line)) {
        if (auto reply = handle_worker_line(line, fn, shutdown)) out << *reply << std::flush;
    }
}

json run_report_to_json(const RunReport& report) {
    json failed = json::array();
    for (const auto& f : report.failed)
        failed.push_back({{"block_index", f.block_index}, {"error", f.error}});
    return json{{"total_blocks", report.total_blocks}, {"succeeded", report.succeeded},
                {"skipped", report.skipped},           {"failed", failed},
                {"wall_seconds", report.wall_seconds}};
}

} // namespace blockvol
