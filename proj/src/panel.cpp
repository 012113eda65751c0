#include "localrd/panel.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

#include "localrd/csv.hpp"
#include "localrd/errors.hpp"

namespace localrd {

namespace {

auto cell_key(const OutcomeCell& c) {
    return std::tie(c.locality_id, c.outcome, c.period, c.age);
}

} // namespace

LocalityPanel LocalityPanel::from_cells(std::vector<OutcomeCell> cells,
                                        std::map<std::string, LocalityMeta> meta) {
    for (const auto& c : cells) {
        if (c.locality_id.empty() || c.outcome.empty()) {
            throw DataError("cells need a nonempty locality_id and outcome");
        }
        if (c.population < 0.0 || !std::isfinite(c.population)) {
            throw DataError("negative or non-finite population for locality " + c.locality_id);
        }
        if (!std::isfinite(c.value)) {
            throw DataError("non-finite value for locality " + c.locality_id);
        }
        if (c.value_variance && (*c.value_variance < 0.0 || !std::isfinite(*c.value_variance))) {
            throw DataError("negative or non-finite value_variance for locality " + c.locality_id);
        }
    }
    // Zero-population cells describe nobody and would only poison weighted
    // pooling, so they are dropped here once and for all.
    std::erase_if(cells, [](const OutcomeCell& c) { return c.population == 0.0; });

    std::sort(cells.begin(), cells.end(),
              [](const OutcomeCell& a, const OutcomeCell& b) { return cell_key(a) < cell_key(b); });

    // Merge duplicate (locality, outcome, period, age) runs into one
    // population-weighted cell. The merged mean is sum(p*v)/sum(p); its
    // variance, when every constituent carries one, is sum(p^2 v)/sum(p)^2.
    std::vector<OutcomeCell> merged;
    merged.reserve(cells.size());
    std::size_t i = 0;
    while (i < cells.size()) {
        std::size_t j = i + 1;
        while (j < cells.size() && cell_key(cells[j]) == cell_key(cells[i])) ++j;
        if (j == i + 1) {
            merged.push_back(std::move(cells[i]));
        } else {
            OutcomeCell out = cells[i];
            double pop = 0.0, pv = 0.0, p2v = 0.0;
            bool all_var = true;
            for (std::size_t k = i; k < j; ++k) {
                const auto& c = cells[k];
                pop += c.population;
                pv += c.population * c.value;
                if (c.value_variance) {
                    p2v += c.population * c.population * (*c.value_variance);
                } else {
                    all_var = false;
                }
            }
            out.population = pop;
            out.value = pv / pop;
            if (all_var) {
                out.value_variance = p2v / (pop * pop);
            } else {
                out.value_variance.reset();
            }
            merged.push_back(std::move(out));
        }
        i = j;
    }

    LocalityPanel panel;
    panel.cells_ = std::move(merged);
    panel.meta_ = std::move(meta);
    return panel;
}

std::vector<std::string> LocalityPanel::locality_ids() const {
    std::vector<std::string> out;
    for (const auto& c : cells_) {
        if (out.empty() || out.back() != c.locality_id) out.push_back(c.locality_id);
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

std::vector<std::string> LocalityPanel::outcomes() const {
    std::set<std::string> s;
    for (const auto& c : cells_) s.insert(c.outcome);
    return {s.begin(), s.end()};
}

std::vector<std::string> LocalityPanel::periods() const {
    std::set<std::string> s;
    for (const auto& c : cells_) s.insert(c.period);
    return {s.begin(), s.end()};
}

int LocalityPanel::min_age() const {
    if (cells_.empty()) throw DataError("panel has no cells");
    int m = cells_.front().age;
    for (const auto& c : cells_) m = std::min(m, c.age);
    return m;
}

int LocalityPanel::max_age() const {
    if (cells_.empty()) throw DataError("panel has no cells");
    int m = cells_.front().age;
    for (const auto& c : cells_) m = std::max(m, c.age);
    return m;
}

void validate_window(const AgeWindow& window) {
    if (window.bandwidth < 2) {
        throw ConfigError("bandwidth must be at least 2 years, got " +
                          std::to_string(window.bandwidth));
    }
    if (!std::isfinite(window.cutoff)) throw ConfigError("cutoff must be finite");
    for (int a : window.donut_ages) {
        if (std::abs(a - window.cutoff) > window.bandwidth) {
            throw ConfigError("donut age " + std::to_string(a) +
                              " lies outside the estimation window");
        }
    }
}

AgeSeries build_age_series(const LocalityPanel& panel, const std::string& locality_id,
                           const std::string& outcome, const AgeWindow& window,
                           const SeriesOptions& options) {
    validate_window(window);
    const bool national = (locality_id == kNationalId);

    // Accumulate in deterministic (sorted cell) order so pooled sums are
    // bit-stable no matter how the panel was assembled.
    struct Acc {
        double pop = 0.0, pv = 0.0, p2v = 0.0;
        bool all_var = true;
    };
    std::map<std::pair<int, std::string>, Acc> groups;
    bool saw_any = false;
    for (const auto& c : panel.cells()) {
        if (c.outcome != outcome) continue;
        if (!national && c.locality_id != locality_id) continue;
        if (options.periods && !options.periods->count(c.period)) continue;
        saw_any = true;
        if (window.donut_ages.count(c.age)) continue;
        const double offset = c.age - window.cutoff;
        if (offset < -window.bandwidth || offset > window.bandwidth) continue;
        auto& acc = groups[{c.age, options.pool_periods ? std::string() : c.period}];
        acc.pop += c.population;
        acc.pv += c.population * c.value;
        if (c.value_variance) {
            acc.p2v += c.population * c.population * (*c.value_variance);
        } else {
            acc.all_var = false;
        }
    }
    if (!saw_any) {
        throw DataError("no cells for locality " + locality_id + ", outcome " + outcome);
    }

    AgeSeries series;
    series.cutoff = window.cutoff;
    std::set<int> left_ages, right_ages;
    for (const auto& [key, acc] : groups) {
        if (acc.pop <= 0.0) continue;
        AgePoint p;
        p.offset = key.first - window.cutoff;
        p.value = acc.pv / acc.pop;
        p.weight = acc.pop;
        if (acc.all_var) p.variance = acc.p2v / (acc.pop * acc.pop);
        series.points.push_back(p);
        (p.offset <= 0.0 ? left_ages : right_ages).insert(key.first);
    }
    if (left_ages.size() < 2 || right_ages.size() < 2) {
        throw DataError("insufficient age support for locality " + locality_id + ", outcome " +
                        outcome + ": need at least 2 distinct ages on each side of the cutoff, have " +
                        std::to_string(left_ages.size()) + " below and " +
                        std::to_string(right_ages.size()) + " above");
    }
    return series;
}

namespace {

int parse_age(const std::string& field, std::size_t line_no) {
    auto v = parse_double(field);
    if (!v || *v != std::floor(*v) || *v < -1e6 || *v > 1e6) {
        throw DataError("line " + std::to_string(line_no) + ": age is not an integer: '" + field + "'");
    }
    return static_cast<int>(*v);
}

} // namespace

LocalityPanel load_panel(const std::string& path, const ColumnSchema& schema) {
    const CsvTable table = read_csv(path);

    const struct {
        const std::string& name;
        const char* role;
    } required[] = {
        {schema.locality_id, "locality_id"}, {schema.age, "age"},
        {schema.period, "period"},           {schema.outcome, "outcome"},
        {schema.value, "value"},             {schema.population, "population"},
    };
    for (const auto& r : required) {
        if (!table.column(r.name)) {
            throw DataError("missing required column '" + r.name + "' (" + r.role + ") in " + path);
        }
    }
    const auto id_col = *table.column(schema.locality_id);
    const auto age_col = *table.column(schema.age);
    const auto period_col = *table.column(schema.period);
    const auto outcome_col = *table.column(schema.outcome);
    const auto value_col = *table.column(schema.value);
    const auto pop_col = *table.column(schema.population);
    const auto var_col = table.column(schema.value_variance);
    const auto name_col = table.column(schema.locality_name);
    const auto state_col = table.column(schema.state);
    const auto region_col = table.column(schema.census_region);
    const auto division_col = table.column(schema.census_division);

    std::vector<OutcomeCell> cells;
    cells.reserve(table.rows.size());
    std::map<std::string, LocalityMeta> meta;
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        const std::size_t line_no = r + 2;
        OutcomeCell cell;
        cell.locality_id = row[id_col];
        if (cell.locality_id.empty()) {
            throw DataError("line " + std::to_string(line_no) + ": empty locality_id");
        }
        cell.age = parse_age(row[age_col], line_no);
        cell.period = row[period_col];
        cell.outcome = row[outcome_col];
        const auto value = parse_double(row[value_col]);
        if (!value) {
            throw DataError("line " + std::to_string(line_no) + ": non-numeric value: '" +
                            row[value_col] + "'");
        }
        cell.value = *value;
        const auto pop = parse_double(row[pop_col]);
        if (!pop) {
            throw DataError("line " + std::to_string(line_no) + ": non-numeric population: '" +
                            row[pop_col] + "'");
        }
        if (*pop < 0.0) {
            throw DataError("line " + std::to_string(line_no) + ": negative population");
        }
        cell.population = *pop;
        if (var_col && !row[*var_col].empty()) {
            const auto v = parse_double(row[*var_col]);
            if (!v || *v < 0.0) {
                throw DataError("line " + std::to_string(line_no) + ": bad value_variance: '" +
                                row[*var_col] + "'");
            }
            cell.value_variance = *v;
        }

        auto& m = meta[cell.locality_id];
        if (name_col && m.name.empty()) m.name = row[*name_col];
        if (state_col && m.state.empty()) m.state = row[*state_col];
        if (region_col && m.census_region.empty()) m.census_region = row[*region_col];
        if (division_col && m.census_division.empty()) m.census_division = row[*division_col];

        cells.push_back(std::move(cell));
    }
    if (cells.empty()) {
        throw DataError("panel file has no data rows: " + path);
    }
    return LocalityPanel::from_cells(std::move(cells), std::move(meta));
}

void export_panel(const LocalityPanel& panel, const std::string& path,
                  const ColumnSchema& schema) {
    bool any_var = false, any_meta = false;
    for (const auto& c : panel.cells()) {
        if (c.value_variance) any_var = true;
    }
    for (const auto& [id, m] : panel.locality_meta()) {
        if (!m.name.empty() || !m.state.empty() || !m.census_region.empty() ||
            !m.census_division.empty()) {
            any_meta = true;
        }
    }

    std::vector<std::string> header = {schema.locality_id};
    if (any_meta) {
        header.push_back(schema.locality_name);
        header.push_back(schema.state);
        header.push_back(schema.census_region);
        header.push_back(schema.census_division);
    }
    header.insert(header.end(),
                  {schema.age, schema.period, schema.outcome, schema.value, schema.population});
    if (any_var) header.push_back(schema.value_variance);

    std::vector<std::vector<std::string>> rows;
    rows.reserve(panel.cells().size());
    const auto& meta = panel.locality_meta();
    for (const auto& c : panel.cells()) {
        std::vector<std::string> row;
        row.push_back(c.locality_id);
        if (any_meta) {
            auto it = meta.find(c.locality_id);
            const LocalityMeta m = (it != meta.end()) ? it->second : LocalityMeta{};
            row.push_back(m.name);
            row.push_back(m.state);
            row.push_back(m.census_region);
            row.push_back(m.census_division);
        }
        row.push_back(std::to_string(c.age));
        row.push_back(c.period);
        row.push_back(c.outcome);
        row.push_back(format_double(c.value));
        row.push_back(format_double(c.population));
        if (any_var) {
            row.push_back(c.value_variance ? format_double(*c.value_variance) : std::string());
        }
        rows.push_back(std::move(row));
    }
    write_csv(path, header, rows);
}

} // namespace localrd
