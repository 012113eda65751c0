#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

// End-to-end checks that shell out to the installed binary. LOCALRD_CLI_PATH
// is injected by the build so the tests always exercise the fresh build.

namespace {

namespace fs = std::filesystem;

std::string cli_path() { return LOCALRD_CLI_PATH; }

int run_cli(const std::string& args) {
    const std::string command = "\"" + cli_path() + "\" " + args + " >/dev/null 2>&1";
    const int status = std::system(command.c_str());
    if (status == -1) return -1;
    return WEXITSTATUS(status);
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("localrd_cli_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str(const std::string& sub = "") const {
        return sub.empty() ? path.string() : (path / sub).string();
    }
    static int counter() {
        static int c = 0;
        return c++;
    }
};

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

int count_lines(const std::string& text) {
    int n = 0;
    for (char c : text) n += c == '\n';
    return n;
}

// Shared simulated panel: moderate noise, fixed seed.
const TempDir& fixture() {
    static TempDir dir;
    static bool ready = false;
    if (!ready) {
        const int rc = run_cli("simulate --n 12 --gamma-mean -2 --gamma-sd 0.5 "
                               "--noise-sd 0.5 --seed 5 --out " + dir.str("dgp"));
        REQUIRE(rc == 0);
        ready = true;
    }
    return dir;
}

} // namespace

TEST_CASE("no subcommand or bad flags exit 2") {
    CHECK(run_cli("") == 2);
    CHECK(run_cli("estimate") == 2);          // missing --panel
    CHECK(run_cli("estimate --panel x --level county") == 2);
    CHECK(run_cli("nonsense") == 2);
}

TEST_CASE("missing panel file exits 3") {
    TempDir out;
    CHECK(run_cli("estimate --panel /nonexistent.csv --out " + out.str()) == 3);
}

TEST_CASE("config errors in values exit 2") {
    const auto& fix = fixture();
    TempDir out;
    CHECK(run_cli("estimate --panel " + fix.str("dgp/panel.csv") +
                  " --donut 65,80 --out " + out.str()) == 2);
    CHECK(run_cli("estimate --panel " + fix.str("dgp/panel.csv") +
                  " --confidence 1.5 --out " + out.str()) == 2);
    CHECK(run_cli("simulate --n 0 --out " + out.str()) == 2);
    CHECK(run_cli("coverage --replications 10 --out " + out.str()) == 2);
}

TEST_CASE("estimate writes per-locality rows plus the pooled one") {
    const auto& fix = fixture();
    TempDir out;
    REQUIRE(run_cli("estimate --panel " + fix.str("dgp/panel.csv") + " --out " +
                    out.str()) == 0);
    const std::string table = slurp(out.str("estimates.csv"));
    CHECK(count_lines(table) == 1 + 12 + 1); // header, localities, NATIONAL
    CHECK(table.find("NATIONAL") != std::string::npos);
    CHECK(table.find(",ok,") != std::string::npos);
    CHECK(fs::exists(out.str("estimate_plotdata.csv")));
    const std::string summary = slurp(out.str("estimate_summary.json"));
    CHECK(summary.find("\"command\": \"estimate\"") != std::string::npos);
    CHECK(summary.find("\"national\"") != std::string::npos);
    // No wall-clock leakage anywhere in the outputs.
    CHECK(summary.find("time") == std::string::npos);
}

TEST_CASE("estimate sweeps multiply the rows") {
    const auto& fix = fixture();
    TempDir out;
    REQUIRE(run_cli("estimate --panel " + fix.str("dgp/panel.csv") +
                    " --sweep bandwidth=3,5 --sweep bound_scale=2,4 --out " +
                    out.str()) == 0);
    const std::string table = slurp(out.str("estimates.csv"));
    CHECK(count_lines(table) == 1 + 4 * 13);
}

TEST_CASE("identical runs are byte identical and workers do not matter") {
    const auto& fix = fixture();
    TempDir a, b, c;
    REQUIRE(run_cli("estimate --panel " + fix.str("dgp/panel.csv") + " --workers 1 --out " +
                    a.str()) == 0);
    REQUIRE(run_cli("estimate --panel " + fix.str("dgp/panel.csv") + " --workers 1 --out " +
                    b.str()) == 0);
    REQUIRE(run_cli("estimate --panel " + fix.str("dgp/panel.csv") + " --workers 8 --out " +
                    c.str()) == 0);
    for (const char* name : {"estimates.csv", "estimate_plotdata.csv",
                             "estimate_summary.json"}) {
        CHECK(slurp(a.str(name)) == slurp(b.str(name)));
        CHECK(slurp(a.str(name)) == slurp(c.str(name)));
    }
}

TEST_CASE("simulate twice with one seed is byte identical, another seed differs") {
    TempDir a, b, c;
    REQUIRE(run_cli("simulate --n 6 --seed 9 --out " + a.str()) == 0);
    REQUIRE(run_cli("simulate --n 6 --seed 9 --out " + b.str()) == 0);
    REQUIRE(run_cli("simulate --n 6 --seed 10 --out " + c.str()) == 0);
    CHECK(slurp(a.str("panel.csv")) == slurp(b.str("panel.csv")));
    CHECK(slurp(a.str("truth.csv")) == slurp(b.str("truth.csv")));
    CHECK(slurp(a.str("panel.csv")) != slurp(c.str("panel.csv")));
}

TEST_CASE("partial failure keeps exit zero, full failure reports the class") {
    const auto& fix = fixture();
    // One locality gets too few usable ages: truncate its rows above age 62.
    const std::string panel = slurp(fix.str("dgp/panel.csv"));
    TempDir dir;
    {
        std::ofstream out(dir.str("maimed.csv"), std::ios::binary);
        std::istringstream in(panel);
        std::string line;
        bool first = true;
        while (std::getline(in, line)) {
            if (!first && line.rfind("L01,", 0) == 0) {
                // age sits in the sixth column of the exported layout
                std::vector<std::string> fields;
                std::istringstream row(line);
                std::string f;
                while (std::getline(row, f, ',')) fields.push_back(f);
                if (std::stoi(fields.at(5)) > 62) continue;
            }
            out << line << "\n";
            first = false;
        }
    }
    TempDir out;
    REQUIRE(run_cli("estimate --panel " + dir.str("maimed.csv") + " --out " + out.str()) ==
            0);
    const std::string table = slurp(out.str("estimates.csv"));
    CHECK(table.find(",error,") != std::string::npos); // the broken locality
    CHECK(table.find(",ok,") != std::string::npos);    // the healthy ones

    // A panel whose every locality lacks a usable window fails with the data
    // exit code.
    TempDir tiny;
    {
        std::ofstream o(tiny.str("tiny.csv"));
        o << "locality_id,age,period,outcome,value,population\n";
        for (int age : {64, 66, 67}) {
            o << "a," << age << ",p,y,1.0,10\n";
            o << "b," << age << ",p,y,2.0,10\n";
        }
    }
    TempDir out2;
    CHECK(run_cli("estimate --panel " + tiny.str("tiny.csv") + " --out " + out2.str()) == 3);
}

TEST_CASE("variance command reports phi per outcome") {
    const auto& fix = fixture();
    TempDir out;
    REQUIRE(run_cli("variance --panel " + fix.str("dgp/panel.csv") + " --out " + out.str()) ==
            0);
    const std::string json = slurp(out.str("variance.json"));
    CHECK(json.find("\"phi\"") != std::string::npos);
    CHECK(json.find("\"var_pre\"") != std::string::npos);
    CHECK(count_lines(slurp(out.str("counterfactuals.csv"))) == 1 + 12);
}

TEST_CASE("shrink command writes factors in the unit interval") {
    const auto& fix = fixture();
    TempDir out;
    REQUIRE(run_cli("shrink --panel " + fix.str("dgp/panel.csv") + " --out " + out.str()) ==
            0);
    const std::string table = slurp(out.str("shrinkage.csv"));
    CHECK(count_lines(table) == 1 + 12);
    CHECK(slurp(out.str("shrink_summary.json")).find("signal_variance") !=
          std::string::npos);
}

TEST_CASE("forecast pipeline runs with linked covariates") {
    TempDir dgp;
    REQUIRE(run_cli("simulate --n 25 --link-covariates 2 --link-coefs=-1.5,0 "
                    "--link-intercept=-2 --link-noise-sd 0.2 --noise-sd 0.4 --seed 13 "
                    "--out " + dgp.str()) == 0);
    TempDir out;
    REQUIRE(run_cli("forecast --panel " + dgp.str("panel.csv") + " --covariates " +
                    dgp.str("covariates.csv") + " --folds 4 --out " + out.str()) == 0);
    const std::string summary = slurp(out.str("forecast_summary.json"));
    CHECK(summary.find("\"tau\"") != std::string::npos);
    CHECK(summary.find("\"selected\"") != std::string::npos);
    CHECK(count_lines(slurp(out.str("forecasts.csv"))) == 1 + 25);

    // Covariates missing a locality that the panel carries is a data error.
    TempDir bad;
    {
        std::ofstream o(bad.str("cov.csv"));
        o << "locality_id,x1\nL01,0.5\n";
    }
    CHECK(run_cli("forecast --panel " + dgp.str("panel.csv") + " --covariates " +
                  bad.str("cov.csv") + " --out " + bad.str()) == 3);
}

TEST_CASE("correlate emits every model family") {
    TempDir dgp;
    REQUIRE(run_cli("simulate --n 30 --link-covariates 2 --link-coefs=1.0,-0.5 "
                    "--link-noise-sd 0.3 --noise-sd 0.3 --seed 21 --out " + dgp.str()) == 0);
    TempDir out;
    REQUIRE(run_cli("correlate --panel " + dgp.str("panel.csv") + " --covariates " +
                    dgp.str("covariates.csv") + " --group-by region --scale-by-national "
                    "--out " + out.str()) == 0);
    const std::string table = slurp(out.str("correlates.csv"));
    CHECK(table.find("bivariate") != std::string::npos);
    CHECK(table.find("multivariate") != std::string::npos);
    CHECK(table.find("post-lasso") != std::string::npos);
    CHECK(table.find("(intercept)") != std::string::npos);
    const std::string summary = slurp(out.str("correlate_summary.json"));
    CHECK(summary.find("\"national_scale\"") != std::string::npos);
}

TEST_CASE("decompose splits the change and writes the difference table") {
    TempDir dgp;
    REQUIRE(run_cli("simulate --n 12 --gamma-mean -1 --gamma-sd 0.3 --noise-sd 0.3 "
                    "--period-labels 2012,2013,2016,2017 --seed 29 --out " +
                    dgp.str()) == 0);
    TempDir out;
    REQUIRE(run_cli("decompose --panel " + dgp.str("panel.csv") +
                    " --outcome y --first-stage-outcome y --pre-periods 2012,2013 "
                    "--post-periods 2016,2017 --diff-in-disc --baseline-periods 2012,2013 "
                    "--out " + out.str()) == 0);
    const std::string json = slurp(out.str("decomposition.json"));
    CHECK(json.find("\"eta1\"") != std::string::npos);
    CHECK(json.find("\"identity_gap\"") != std::string::npos);
    CHECK(json.find("\"groups\"") != std::string::npos);
    CHECK(count_lines(slurp(out.str("diffdisc.csv"))) == 1 + 12);

    // Overlapping period sets are a config error.
    CHECK(run_cli("decompose --panel " + dgp.str("panel.csv") +
                  " --outcome y --first-stage-outcome y --pre-periods 2012,2016 "
                  "--post-periods 2016,2017 --out " + out.str()) == 2);
}

TEST_CASE("binscatter bins respect weights and count points") {
    TempDir dir;
    {
        std::ofstream o(dir.str("points.csv"));
        o << "x,y,w\n";
        for (int i = 0; i < 40; ++i) {
            o << i << "," << 2 * i << "," << (i < 20 ? 1 : 3) << "\n";
        }
    }
    TempDir out;
    REQUIRE(run_cli("binscatter --input " + dir.str("points.csv") +
                    " --x x --y y --weight-col w --bins 5 --out " + out.str()) == 0);
    const std::string table = slurp(out.str("binscatter.csv"));
    CHECK(count_lines(table) == 1 + 5);
    const std::string summary = slurp(out.str("binscatter_summary.json"));
    CHECK(summary.find("\"slope\"") != std::string::npos);
    CHECK(run_cli("binscatter --input " + dir.str("points.csv") +
                  " --x x --y y --bins 100 --out " + out.str()) == 2);
    CHECK(run_cli("binscatter --input " + dir.str("points.csv") +
                  " --x nope --y y --bins 5 --out " + out.str()) == 3);
}

TEST_CASE("coverage study is reproducible across worker counts") {
    TempDir a, b;
    const std::string flags = "coverage --n 6 --gamma-mean -2 --gamma-sd 0.4 "
                              "--noise-sd 1 --replications 120 --seed 3 ";
    REQUIRE(run_cli(flags + "--workers 1 --out " + a.str()) == 0);
    REQUIRE(run_cli(flags + "--workers 8 --out " + b.str()) == 0);
    CHECK(slurp(a.str("coverage.json")) == slurp(b.str("coverage.json")));
    const std::string json = slurp(a.str("coverage.json"));
    CHECK(json.find("\"coverage\"") != std::string::npos);
    CHECK(json.find("\"events\": 720") != std::string::npos);
}

TEST_CASE("state level aggregation pools localities") {
    const auto& fix = fixture();
    TempDir out;
    REQUIRE(run_cli("estimate --panel " + fix.str("dgp/panel.csv") +
                    " --level state --out " + out.str()) == 0);
    const std::string table = slurp(out.str("estimates.csv"));
    // 12 localities spread over max(1, 12/5) = 2 states.
    CHECK(count_lines(table) == 1 + 2 + 1);
    CHECK(table.find("S1") != std::string::npos);

    TempDir out2;
    REQUIRE(run_cli("estimate --panel " + fix.str("dgp/panel.csv") +
                    " --level national --out " + out2.str()) == 0);
    CHECK(count_lines(slurp(out2.str("estimates.csv"))) == 1 + 1);
}
