#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace localrd {

// One aggregated panel cell: the mean outcome value over everyone of a given
// age in a locality and period, the population behind that mean, and
// optionally the sampling variance of the mean itself.
struct OutcomeCell {
    std::string locality_id;
    int age = 0;
    std::string period;
    std::string outcome;
    double value = 0.0;
    double population = 0.0;
    std::optional<double> value_variance;
};

struct LocalityMeta {
    std::string name;
    std::string state;
    std::string census_region;
    std::string census_division;
};

// Maps canonical column names to the headers actually present in a file.
struct ColumnSchema {
    std::string locality_id = "locality_id";
    std::string locality_name = "locality_name";
    std::string state = "state";
    std::string census_region = "census_region";
    std::string census_division = "census_division";
    std::string age = "age";
    std::string period = "period";
    std::string outcome = "outcome";
    std::string value = "value";
    std::string population = "population";
    std::string value_variance = "value_variance";
};

// Pooled estimates across all localities use this pseudo-identifier.
inline constexpr const char* kNationalId = "NATIONAL";

// Immutable cell store. Construction merges duplicate
// (locality, age, period, outcome) cells into one population-weighted cell,
// so downstream code can assume keys are unique.
class LocalityPanel {
public:
    LocalityPanel() = default;
    static LocalityPanel from_cells(std::vector<OutcomeCell> cells,
                                    std::map<std::string, LocalityMeta> meta = {});

    const std::vector<OutcomeCell>& cells() const { return cells_; }
    const std::map<std::string, LocalityMeta>& locality_meta() const { return meta_; }

    std::vector<std::string> locality_ids() const;
    std::vector<std::string> outcomes() const;
    std::vector<std::string> periods() const;
    int min_age() const;
    int max_age() const;
    bool empty() const { return cells_.empty(); }

private:
    std::vector<OutcomeCell> cells_; // sorted by (locality, outcome, period, age)
    std::map<std::string, LocalityMeta> meta_;
};

// Estimation window around the eligibility cutoff. Ages listed in donut_ages
// are dropped before any fitting; every donut age must lie inside the window.
struct AgeWindow {
    double cutoff = 65.0;
    int bandwidth = 5;
    std::set<int> donut_ages = {65};
};

void validate_window(const AgeWindow& window);

struct AgePoint {
    double offset = 0.0; // age minus cutoff
    double value = 0.0;
    double weight = 0.0; // pooled population
    std::optional<double> variance;
};

struct AgeSeries {
    std::vector<AgePoint> points; // ascending offset
    double cutoff = 65.0;
};

struct SeriesOptions {
    // Keep only cells whose period label is in this set (all periods when unset).
    std::optional<std::set<std::string>> periods;
    // Pool periods into one point per age. When false, one point per
    // (age, period) survives, which lets standard errors cluster on age.
    bool pool_periods = true;
};

// Series for one locality (or kNationalId for the population-weighted pool of
// all localities), one outcome. Donut ages are excluded, offsets are centered
// at the cutoff, and only |offset| <= bandwidth survives. Requires at least
// two distinct ages on each side of the cutoff.
AgeSeries build_age_series(const LocalityPanel& panel, const std::string& locality_id,
                           const std::string& outcome, const AgeWindow& window,
                           const SeriesOptions& options = {});

LocalityPanel load_panel(const std::string& path, const ColumnSchema& schema = {});
void export_panel(const LocalityPanel& panel, const std::string& path,
                  const ColumnSchema& schema = {});

} // namespace localrd
