#include "blockvol/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace blockvol {

using nlohmann::json;
namespace fs = std::filesystem;

ContingencyTable contingency(const Tensor& gt, const Tensor& pred, bool ignore_background) {
    if (gt.shape() != pred.shape())
        fail(Errc::invalid_argument, "contingency: shape mismatch " + gt.shape().to_string() +
                                         " vs " + pred.shape().to_string());
    auto a = to_u64(gt);
    auto b = to_u64(pred);
    ContingencyTable table;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (ignore_background && a[i] == 0 && b[i] == 0) continue;
        ++table.counts[{a[i], b[i]}];
        ++table.marginal_a[a[i]];
        ++table.marginal_b[b[i]];
        ++table.n;
    }
    return table;
}

VoiScores voi(const ContingencyTable& table) {
    if (table.n == 0) fail(Errc::invalid_argument, "voi: empty contingency table");
    const double n = static_cast<double>(table.n);

    // split = H(B|A) = -sum p_ij log2(p_ij / p_i.), merge = H(A|B).
    VoiScores scores;
    for (const auto& [labels, count] : table.counts) {
        const double p = static_cast<double>(count) / n;
        const double pa = static_cast<double>(table.marginal_a.at(labels.first)) / n;
        const double pb = static_cast<double>(table.marginal_b.at(labels.second)) / n;
        scores.split -= p * std::log2(p / pa);
        scores.merge -= p * std::log2(p / pb);
    }
    // Clamp the -0.0 that exact partitions produce.
    if (scores.split < 0 && scores.split > -1e-12) scores.split = 0;
    if (scores.merge < 0 && scores.merge > -1e-12) scores.merge = 0;
    scores.total = scores.split + scores.merge;
    return scores;
}

OverlapScores overlap_metrics(const Tensor& gt_mask, const Tensor& pred_mask) {
    if (gt_mask.shape() != pred_mask.shape())
        fail(Errc::invalid_argument, "overlap_metrics: shape mismatch");
    auto a = to_u64(gt_mask);
    auto b = to_u64(pred_mask);

    OverlapScores s;
    for (std::size_t i = 0; i < a.size(); ++i) {
        bool gt_fg = a[i] != 0, pred_fg = b[i] != 0;
        if (gt_fg && pred_fg)
            ++s.tp;
        else if (!gt_fg && pred_fg)
            ++s.fp;
        else if (gt_fg && !pred_fg)
            ++s.fn;
    }
    if (s.tp + s.fp + s.fn == 0) {
        // Empty vs empty: a correctly predicted empty class is perfect.
        s.dice = s.jaccard = s.f1 = s.precision = s.recall = 1.0;
        return s;
    }
    const double tp = static_cast<double>(s.tp);
    s.dice = 2 * tp / static_cast<double>(2 * s.tp + s.fp + s.fn);
    s.jaccard = tp / static_cast<double>(s.tp + s.fp + s.fn);
    s.precision = s.tp + s.fp ? tp / static_cast<double>(s.tp + s.fp) : 0.0;
    s.recall = s.tp + s.fn ? tp / static_cast<double>(s.tp + s.fn) : 0.0;
    // f1 from precision/recall, independently of the dice expression.
    s.f1 = (s.precision + s.recall) > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    return s;
}

MetricOrientation metric_orientation(const std::string& name) {
    if (is_overlap_metric(name)) return MetricOrientation::higher_better;
    if (name == "voi_split" || name == "voi_merge" || name == "voi_total")
        return MetricOrientation::lower_better;
    fail(Errc::config, "unknown metric \"" + name + "\"");
}

bool is_overlap_metric(const std::string& name) {
    return name == "dice" || name == "jaccard" || name == "f1" || name == "precision" ||
           name == "recall";
}

// ---------------------------------------------------------------------------
// Datasplit CSV
// ---------------------------------------------------------------------------

namespace {

/// One CSV record with RFC-4180 quoting ("" escapes a quote inside quotes).
std::vector<std::string> parse_csv_line(const std::string& line, std::size_t lineno) {
    std::vector<std::string> fields;
    std::string field;
    bool quoted = false;
    std::size_t i = 0;
    while (i < line.size()) {
        char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field.push_back(c);
            }
        } else if (c == '"' && field.empty()) {
            quoted = true;
        } else if (c == ',') {
            fields.push_back(std::move(field));
            field.clear();
        } else {
            field.push_back(c);
        }
        ++i;
    }
    if (quoted)
        fail(Errc::config, "datasplit line " + std::to_string(lineno) + ": unterminated quote");
    fields.push_back(std::move(field));
    return fields;
}

std::string trim(const std::string& s) {
    auto begin = s.find_first_not_of(" \t\r");
    auto end = s.find_last_not_of(" \t\r");
    return begin == std::string::npos ? "" : s.substr(begin, end - begin + 1);
}

} // namespace

std::vector<DataSplitRow> DataSplit::validate_rows() const {
    std::vector<DataSplitRow> out;
    for (const auto& row : rows)
        if (row.usage == DataSplitRow::Usage::validate) out.push_back(row);
    return out;
}

DataSplit parse_datasplit(const std::string& csv_text, const fs::path& base_dir) {
    std::istringstream in(csv_text);
    std::string line;
    std::size_t lineno = 0;

    if (!std::getline(in, line)) fail(Errc::config, "datasplit: empty file (header row required)");
    ++lineno;
    auto header = parse_csv_line(line, lineno);
    for (auto& h : header) h = trim(h);

    auto column = [&](const std::string& name) {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end())
            fail(Errc::config, "datasplit: missing required column \"" + name + "\"");
        return static_cast<std::size_t>(it - header.begin());
    };
    const std::size_t col_usage = column("usage");
    const std::size_t col_raw_path = column("raw_path");
    const std::size_t col_raw_dataset = column("raw_dataset");
    const std::size_t col_gt_path = column("gt_path");
    const std::size_t col_gt_dataset = column("gt_dataset");
    const std::size_t known[] = {col_usage, col_raw_path, col_raw_dataset, col_gt_path,
                                 col_gt_dataset};

    DataSplit split;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        auto fields = parse_csv_line(line, lineno);
        if (fields.size() < header.size())
            fail(Errc::config, "datasplit row " + std::to_string(lineno) + ": expected " +
                                   std::to_string(header.size()) + " columns, got " +
                                   std::to_string(fields.size()));

        DataSplitRow row;
        std::string usage = trim(fields[col_usage]);
        if (usage == "train")
            row.usage = DataSplitRow::Usage::train;
        else if (usage == "validate")
            row.usage = DataSplitRow::Usage::validate;
        else
            fail(Errc::config, "datasplit row " + std::to_string(lineno) + ": unknown usage \"" +
                                   usage + "\" (expected train or validate)");

        row.raw = {base_dir / trim(fields[col_raw_path]), trim(fields[col_raw_dataset])};
        row.gt = {base_dir / trim(fields[col_gt_path]), trim(fields[col_gt_dataset])};
        for (std::size_t c = 0; c < header.size(); ++c) {
            if (std::find(std::begin(known), std::end(known), c) != std::end(known)) continue;
            row.extra[header[c]] = c < fields.size() ? fields[c] : "";
        }
        split.rows.push_back(std::move(row));
    }
    return split;
}

DataSplit load_datasplit(const fs::path& csv_path) {
    std::ifstream in(csv_path);
    if (!in) fail(Errc::io, "cannot read datasplit " + csv_path.string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>{});
    return parse_datasplit(text, csv_path.parent_path());
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

namespace {

/// Compares parameter assignments by key-sorted (name, value) tuples.
bool params_less(const std::map<std::string, json>& a, const std::map<std::string, json>& b) {
    auto ia = a.begin();
    auto ib = b.begin();
    for (; ia != a.end() && ib != b.end(); ++ia, ++ib) {
        if (ia->first != ib->first) return ia->first < ib->first;
        if (ia->second != ib->second) {
            if (ia->second.is_number() && ib->second.is_number())
                return ia->second.get<double>() < ib->second.get<double>();
            return ia->second.dump() < ib->second.dump();
        }
    }
    return a.size() < b.size();
}

std::map<std::string, double> evaluate_cell(const SweepPost& post,
                                            const std::map<std::string, json>& params,
                                            const Tensor& gt, const Tensor& prediction) {
    double t = params.at("threshold").get<double>();
    std::uint64_t min_size =
        params.contains("min_size") ? params.at("min_size").get<std::uint64_t>() : 0;

    std::map<std::string, double> scores;
    switch (post.kind) {
        case SweepPost::Kind::threshold_mask: {
            Tensor mask = threshold(prediction, post.channel, t);
            if (min_size > 1) {
                Tensor labeled = label_volume(mask, post.connectivity);
                size_filter_tensor(labeled, min_size);
                mask = labeled;
            }
            OverlapScores s = overlap_metrics(gt, mask);
            scores = {{"dice", s.dice},
                      {"jaccard", s.jaccard},
                      {"f1", s.f1},
                      {"precision", s.precision},
                      {"recall", s.recall}};
            break;
        }
        case SweepPost::Kind::threshold_cc:
        case SweepPost::Kind::affinity_cc: {
            Tensor labels = post.kind == SweepPost::Kind::threshold_cc
                                ? label_volume(threshold(prediction, post.channel, t),
                                               post.connectivity)
                                : decode_affinities(prediction, post.offsets, t);
            size_filter_tensor(labels, min_size);
            VoiScores s = voi(contingency(gt, labels, true));
            scores = {{"voi_split", s.split}, {"voi_merge", s.merge}, {"voi_total", s.total}};
            break;
        }
    }
    return scores;
}

} // namespace

SweepOutcome sweep(const SweepRequest& request) {
    if (request.checkpoints.empty()) fail(Errc::config, "sweep: no checkpoints");
    if (request.gt.empty()) fail(Errc::config, "sweep: no ground-truth volumes");
    if (request.grid.empty() || !request.grid.contains("threshold"))
        fail(Errc::config, "sweep: the parameter grid needs at least \"threshold\"");
    for (const auto& [name, values] : request.grid)
        if (values.empty()) fail(Errc::config, "sweep: empty grid for parameter \"" + name + "\"");

    MetricOrientation orientation = metric_orientation(request.selection_metric);
    const bool semantic = is_overlap_metric(request.selection_metric);
    if (semantic && request.post.kind != SweepPost::Kind::threshold_mask)
        fail(Errc::config, "sweep: overlap metrics pair with semantic (threshold_mask) post-processing");
    if (!semantic && request.post.kind == SweepPost::Kind::threshold_mask)
        fail(Errc::config, "sweep: VoI metrics pair with instance post-processing");

    // Cartesian product of the grid, in listed value order per name.
    std::vector<std::map<std::string, json>> assignments{{}};
    for (const auto& [name, values] : request.grid) {
        std::vector<std::map<std::string, json>> next;
        next.reserve(assignments.size() * values.size());
        for (const auto& partial : assignments)
            for (const auto& v : values) {
                auto a = partial;
                a[name] = v;
                next.push_back(std::move(a));
            }
        assignments = std::move(next);
    }

    // Ground truths load once.
    std::vector<Tensor> gt_volumes;
    gt_volumes.reserve(request.gt.size());
    for (const auto& ref : request.gt) {
        auto vol = open_dataset(ref);
        gt_volumes.push_back(read_roi(vol, vol.bounds()));
    }

    SweepOutcome outcome;
    outcome.selection_metric = request.selection_metric;
    bool have_best = false;

    for (const auto& checkpoint : request.checkpoints) {
        if (checkpoint.predictions.size() != request.gt.size())
            fail(Errc::config, "sweep: checkpoint " + std::to_string(checkpoint.iteration) + " has " +
                                   std::to_string(checkpoint.predictions.size()) +
                                   " predictions for " + std::to_string(request.gt.size()) +
                                   " validate volumes");
        // Load predictions once per checkpoint; a failure poisons only the
        // cells of this checkpoint.
        std::vector<Tensor> predictions;
        std::string load_error;
        try {
            for (const auto& ref : checkpoint.predictions) {
                auto vol = open_dataset(ref);
                predictions.push_back(read_roi(vol, vol.bounds()));
            }
        } catch (const std::exception& e) {
            load_error = e.what();
        }

        for (const auto& params : assignments) {
            SweepCell cell;
            cell.iteration = checkpoint.iteration;
            cell.params = params;
            if (!load_error.empty()) {
                cell.status = "error";
                cell.error = load_error;
                outcome.cells.push_back(std::move(cell));
                continue;
            }
            try {
                std::map<std::string, double> sums;
                for (std::size_t r = 0; r < gt_volumes.size(); ++r) {
                    auto scores = evaluate_cell(request.post, params, gt_volumes[r], predictions[r]);
                    for (const auto& [k, v] : scores) sums[k] += v;
                }
                for (auto& [k, v] : sums) v /= static_cast<double>(gt_volumes.size());
                cell.scores = std::move(sums);
            } catch (const std::exception& e) {
                cell.status = "error";
                cell.error = e.what();
            }

            if (cell.status == "ok") {
                double score = cell.scores.at(request.selection_metric);
                bool better = false;
                if (!have_best) {
                    better = true;
                } else {
                    double best_score = outcome.best.scores.at(request.selection_metric);
                    if (orientation == MetricOrientation::higher_better)
                        better = score > best_score;
                    else
                        better = score < best_score;
                    if (!better && score == best_score) {
                        // Tie-break: earlier checkpoint, then smaller params.
                        if (cell.iteration < outcome.best.iteration)
                            better = true;
                        else if (cell.iteration == outcome.best.iteration)
                            better = params_less(cell.params, outcome.best.params);
                    }
                }
                if (better) {
                    outcome.best = cell;
                    have_best = true;
                }
            }
            outcome.cells.push_back(std::move(cell));
        }
    }
    if (!have_best) fail(Errc::io, "sweep: every cell failed");
    return outcome;
}

json SweepOutcome::to_json() const {
    json cells_json = json::array();
    for (const auto& cell : cells) {
        json c{{"iteration", cell.iteration},
               {"params", cell.params},
               {"scores", cell.scores},
               {"status", cell.status}};
        if (!cell.error.empty()) c["error"] = cell.error;
        cells_json.push_back(std::move(c));
    }
    return json{{"cells", cells_json},
                {"best", {{"iteration", best.iteration}, {"params", best.params},
                          {"scores", best.scores}}},
                {"selection_metric", selection_metric}};
}

std::map<std::string, double> evaluate_segmentation(const Tensor& gt, const Tensor& seg) {
    OverlapScores overlap = overlap_metrics(gt, seg);
    VoiScores v = voi(contingency(gt, seg, true));
    return {{"dice", overlap.dice},     {"jaccard", overlap.jaccard}, {"f1", overlap.f1},
            {"precision", overlap.precision}, {"recall", overlap.recall},   {"voi_split", v.split},
            {"voi_merge", v.merge},     {"voi_total", v.total}};
}

} // namespace blockvol
