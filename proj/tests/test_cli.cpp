#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "json_schema.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string cli_path() {
    const char* env = std::getenv("METAPOOL_CLI");
    REQUIRE_MESSAGE(env != nullptr, "METAPOOL_CLI must point at the CLI binary");
    return env;
}

std::string schema_dir() {
    const char* env = std::getenv("METAPOOL_SCHEMAS");
    REQUIRE_MESSAGE(env != nullptr, "METAPOOL_SCHEMAS must point at docs/schemas");
    return env;
}

struct RunResult {
    int exit_code = -1;
    std::string out;
    std::string err;
};

RunResult run(const std::string& args) {
    const fs::path dir = fs::temp_directory_path();
    const std::string out_path = (dir / "metapool_cli_stdout.txt").string();
    const std::string err_path = (dir / "metapool_cli_stderr.txt").string();
    const std::string command =
        cli_path() + " " + args + " >" + out_path + " 2>" + err_path;
    const int status = std::system(command.c_str());
    RunResult result;
    result.exit_code = WEXITSTATUS(status);
    auto slurp = [](const std::string& path) {
        std::ifstream in(path);
        return std::string((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
    };
    result.out = slurp(out_path);
    result.err = slurp(err_path);
    return result;
}

std::string slurp_file(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

json load_schema(const std::string& name) {
    return json::parse(slurp_file(schema_dir() + "/" + name));
}

struct Workspace {
    fs::path dir;
    Workspace() {
        dir = fs::temp_directory_path() / "metapool_cli_test";
        fs::create_directories(dir);
    }
    std::string path(const std::string& name) const { return (dir / name).string(); }
    void write(const std::string& name, const std::string& text) const {
        std::ofstream(path(name)) << text;
    }
};

const char* kToyCsv = "source_id,y,s\nA,1,1\nB,2,1\nC,3,2\nD,2.5,0.5\n";
const char* kCovCsv =
    "source_id,y,s,x1\nA,2,1,0\nB,5,1,1\nC,8,1,2\nD,11,2,3\nE,14.5,1,4\nF,16,0.5,5\n";

}  // namespace

TEST_CASE("estimate: table on stdout and method selection") {
    Workspace ws;
    ws.write("toy.csv", kToyCsv);
    const auto result = run("estimate --data " + ws.path("toy.csv") + " --method raw");
    CHECK(result.exit_code == 0);
    // raw mean of (1, 2, 3, 2.5) = 2.125
    CHECK(result.out.find("raw,mu,2.125") != std::string::npos);

    const auto all = run("estimate --data " + ws.path("toy.csv") + " --method all");
    CHECK(all.exit_code == 0);
    for (const char* method : {"raw,", "weighted,", "trimmed,"})
        CHECK(all.out.find(method) != std::string::npos);
}

TEST_CASE("estimate: regression methods require and use covariates") {
    Workspace ws;
    ws.write("cov.csv", kCovCsv);
    ws.write("toy.csv", kToyCsv);

    const auto result =
        run("estimate --data " + ws.path("cov.csv") + " --method all --covariates --out " +
            ws.path("est.csv"));
    CHECK(result.exit_code == 0);
    const std::string table = slurp_file(ws.path("est.csv"));
    for (const char* method : {"lr,", "wlr,", "twlr,"})
        CHECK(table.find(method) != std::string::npos);
    CHECK(table.find("beta1") != std::string::npos);
    // weight table lands next to the main output
    CHECK(fs::exists(ws.path("est.csv") + ".weights.csv"));

    const auto missing = run("estimate --data " + ws.path("toy.csv") + " --covariates");
    CHECK(missing.exit_code == 2);
    CHECK(missing.err.find("CovariateDimensionMismatch") != std::string::npos);
}

TEST_CASE("estimate: malformed input exits 2 and names the line") {
    Workspace ws;
    ws.write("bad.csv", "source_id,y,s\nA,1,1\nB,x,1\n");
    const auto result = run("estimate --data " + ws.path("bad.csv"));
    CHECK(result.exit_code == 2);
    CHECK(result.err.find("line 3") != std::string::npos);

    const auto missing = run("estimate --data " + ws.path("nope.csv"));
    CHECK(missing.exit_code == 2);
}

TEST_CASE("estimate: json format validates against the shipped schema") {
    Workspace ws;
    ws.write("toy.csv", kToyCsv);
    const auto result = run("--format json estimate --data " + ws.path("toy.csv") + " --out " +
                            ws.path("est.json"));
    REQUIRE(result.exit_code == 0);
    const json table = json::parse(slurp_file(ws.path("est.json")));
    std::string error;
    CHECK_MESSAGE(json_schema::validate(table, load_schema("table.schema.json"), error), error);
    CHECK(table.at("rows").size() == 3);
}

TEST_CASE("fit commands: draw files, sidecars, and determinism") {
    Workspace ws;
    ws.write("toy.csv", kToyCsv);
    const std::string fit_args = " --chains 2 --iter 400 --warmup 150 --thin 2";

    const auto ubm = run("--seed 11 fit-ubm --data " + ws.path("toy.csv") + " --out " +
                         ws.path("ubm") + fit_args);
    REQUIRE(ubm.exit_code == 0);
    REQUIRE(fs::exists(ws.path("ubm.csv")));
    REQUIRE(fs::exists(ws.path("ubm.json")));

    SUBCASE("sidecar validates against the fit summary schema") {
        const json sidecar = json::parse(slurp_file(ws.path("ubm.json")));
        std::string error;
        CHECK_MESSAGE(
            json_schema::validate(sidecar, load_schema("fit_summary.schema.json"), error), error);
        CHECK(sidecar.at("model") == "ubm");
        CHECK(sidecar.at("seed") == 11);
    }

    SUBCASE("same seed, byte-identical outputs; different seed differs") {
        const auto again = run("--seed 11 fit-ubm --data " + ws.path("toy.csv") + " --out " +
                               ws.path("ubm2") + fit_args);
        REQUIRE(again.exit_code == 0);
        CHECK(slurp_file(ws.path("ubm.csv")) == slurp_file(ws.path("ubm2.csv")));
        CHECK(slurp_file(ws.path("ubm.json")) == slurp_file(ws.path("ubm2.json")));

        const auto other = run("--seed 12 fit-ubm --data " + ws.path("toy.csv") + " --out " +
                               ws.path("ubm3") + fit_args);
        REQUIRE(other.exit_code == 0);
        CHECK(slurp_file(ws.path("ubm.csv")) != slurp_file(ws.path("ubm3.csv")));
    }

    SUBCASE("retained draw count follows the config arithmetic") {
        const std::string csv = slurp_file(ws.path("ubm.csv"));
        const auto lines = std::count(csv.begin(), csv.end(), '\n');
        CHECK(lines == 1 + 2 * 125);  // header + chains * floor((400-150)/2)
    }
}

TEST_CASE("fit defaults retain 900 draws per parameter") {
    Workspace ws;
    ws.write("toy.csv", kToyCsv);
    const auto result =
        run("fit-ubm --data " + ws.path("toy.csv") + " --out " + ws.path("default"));
    REQUIRE(result.exit_code == 0);
    const json sidecar = json::parse(slurp_file(ws.path("default.json")));
    CHECK(sidecar.at("config").at("chains") == 3);
    CHECK(sidecar.at("config").at("iterations") == 5000);
    CHECK(sidecar.at("config").at("warmup") == 2000);
    CHECK(sidecar.at("config").at("thin") == 10);
    const std::string csv = slurp_file(ws.path("default.csv"));
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 900);
}

TEST_CASE("fit-bbm, weights, and ppc round-trip") {
    Workspace ws;
    // heterogeneous uncertainties so the bivariate fit has signal
    ws.write("data.csv",
             "source_id,y,s\nA,9.1,1.2\nB,11.4,2.1\nC,13.2,4.8\nD,9.9,0.8\nE,10.4,1.7\n"
             "F,12.8,3.9\nG,8.8,0.9\nH,10.9,2.4\nI,11.9,3.1\nJ,9.4,1.1\n");
    const std::string fit_args = " --chains 2 --iter 500 --warmup 200 --thin 1";

    const auto bbm = run("--seed 21 fit-bbm --data " + ws.path("data.csv") + " --out " +
                         ws.path("bbm") + fit_args + " --fix-sigma-s empirical");
    REQUIRE(bbm.exit_code == 0);

    SUBCASE("sidecar carries the fixed sigma_s echo") {
        const json sidecar = json::parse(slurp_file(ws.path("bbm.json")));
        std::string error;
        CHECK_MESSAGE(
            json_schema::validate(sidecar, load_schema("fit_summary.schema.json"), error), error);
        CHECK(sidecar.at("model") == "bbm");
        REQUIRE(sidecar.contains("fixed_sigma_s"));
        CHECK(sidecar.at("fixed_sigma_s").size() == 10);
    }

    SUBCASE("weights from draws sum to one") {
        const auto weights = run("weights --data " + ws.path("data.csv") +
                                 " --method bbm --draws " + ws.path("bbm") + " --out " +
                                 ws.path("w.csv"));
        REQUIRE(weights.exit_code == 0);
        std::ifstream in(ws.path("w.csv"));
        std::string line;
        std::getline(in, line);  // header
        double total = 0.0;
        int rows = 0;
        while (std::getline(in, line)) {
            const auto last_comma = line.rfind(',');
            total += std::stod(line.substr(last_comma + 1));
            ++rows;
        }
        CHECK(rows == 10);
        CHECK(total == doctest::Approx(1.0).epsilon(1e-10));
    }

    SUBCASE("strong rho1 narrows the weight spread relative to inverse-variance") {
        auto lambda_range = [&](const std::string& method, const std::string& extra) {
            const std::string out = ws.path("w_" + method + ".csv");
            const auto result = run("weights --data " + ws.path("data.csv") + " --method " +
                                    method + extra + " --out " + out);
            REQUIRE(result.exit_code == 0);
            std::ifstream in(out);
            std::string line;
            std::getline(in, line);
            double lo = 1.0, hi = 0.0;
            while (std::getline(in, line)) {
                const double lambda = std::stod(line.substr(line.rfind(',') + 1));
                lo = std::min(lo, lambda);
                hi = std::max(hi, lambda);
            }
            return hi - lo;
        };
        // the fixture has y rising with s, so the fitted rho1 is large and
        // the bivariate weights flatten toward 1/n
        const double bbm_range = lambda_range("bbm", " --draws " + ws.path("bbm"));
        const double weighted_range = lambda_range("weighted", "");
        CHECK(bbm_range < weighted_range);
    }

    SUBCASE("weights as json validates against the table schema") {
        const auto weights = run("--format json weights --data " + ws.path("data.csv") +
                                 " --method bbm --draws " + ws.path("bbm") + " --out " +
                                 ws.path("w.json"));
        REQUIRE(weights.exit_code == 0);
        const json table = json::parse(slurp_file(ws.path("w.json")));
        std::string error;
        CHECK_MESSAGE(json_schema::validate(table, load_schema("table.schema.json"), error),
                      error);
        CHECK(table.at("rows").size() == 10);
        double total = 0.0;
        for (const auto& row : table.at("rows")) total += row.at("lambda").get<double>();
        CHECK(total == doctest::Approx(1.0).epsilon(1e-10));
    }

    SUBCASE("weights for ubm/bbm demand a draws file") {
        const auto missing = run("weights --data " + ws.path("data.csv") + " --method bbm");
        CHECK(missing.exit_code == 2);
        CHECK(missing.err.find("MissingDrawsFile") != std::string::npos);
    }

    SUBCASE("ppc consumes the draw files and emits schema-valid JSON") {
        const auto ppc = run("ppc --data " + ws.path("data.csv") + " --draws " + ws.path("bbm") +
                             " --out " + ws.path("ppc.json") + " --t-out " + ws.path("t.csv"));
        REQUIRE(ppc.exit_code == 0);
        const json result = json::parse(slurp_file(ws.path("ppc.json")));
        std::string error;
        CHECK_MESSAGE(json_schema::validate(result, load_schema("ppc.schema.json"), error), error);
        CHECK(result.at("p_value").get<double>() >= 0.0);
        CHECK(result.at("p_value").get<double>() <= 1.0);
        CHECK(result.at("n_draws") == 600);
        const std::string t_table = slurp_file(ws.path("t.csv"));
        CHECK(t_table.rfind("draw,t_obs,t_rep\n", 0) == 0);
        CHECK(std::count(t_table.begin(), t_table.end(), '\n') == 601);
    }
}

TEST_CASE("weights: equal uncertainties give uniform lambdas") {
    Workspace ws;
    ws.write("equal.csv", "source_id,y,s\nA,1,2\nB,2,2\nC,3,2\nD,4,2\n");
    const auto result = run("weights --data " + ws.path("equal.csv") + " --method weighted");
    REQUIRE(result.exit_code == 0);
    std::stringstream stream(result.out);
    std::string line;
    while (std::getline(stream, line)) {
        const auto last_comma = line.rfind(',');
        CHECK(std::stod(line.substr(last_comma + 1)) == doctest::Approx(0.25).epsilon(1e-12));
    }
}

TEST_CASE("simulate: scenario config drives the harness") {
    Workspace ws;
    ws.write("config.json", R"({
      "seed": 5,
      "n_reps": 12,
      "methods": ["raw", "weighted", "oracle"],
      "scenarios": [
        {"id": "a", "n": 20, "rho1": 0.0, "rho2": 0.0},
        {"id": "b", "n": 20, "rho1": 0.5, "rho2": 0.5, "n_reps": 6}
      ]
    })");
    const auto result = run("simulate --config " + ws.path("config.json") + " --out " +
                            ws.path("metrics.csv") + " --estimates-out " + ws.path("long.csv") +
                            " --threads 2");
    REQUIRE(result.exit_code == 0);
    const std::string metrics = slurp_file(ws.path("metrics.csv"));
    CHECK(metrics.rfind("scenario,method,parameter,bias,mse,coverage,n_reps,failures", 0) == 0);
    CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 1 + 6);
    CHECK(metrics.find("oracle,mu,0,0,1,") != std::string::npos);
    const std::string estimates = slurp_file(ws.path("long.csv"));
    CHECK(std::count(estimates.begin(), estimates.end(), '\n') == 1 + 3 * 12 + 3 * 6);

    SUBCASE("repeat run is byte-identical") {
        const auto again = run("simulate --config " + ws.path("config.json") + " --out " +
                               ws.path("metrics2.csv") + " --threads 1");
        REQUIRE(again.exit_code == 0);
        CHECK(slurp_file(ws.path("metrics.csv")) == slurp_file(ws.path("metrics2.csv")));
    }

    SUBCASE("bad config exits 2") {
        ws.write("empty.json", R"({"scenarios": []})");
        const auto bad = run("simulate --config " + ws.path("empty.json"));
        CHECK(bad.exit_code == 2);
    }
}

TEST_CASE("simulate: theta recovery table") {
    Workspace ws;
    ws.write("config.json", R"({
      "seed": 9,
      "fit": {"chains": 2, "iterations": 400, "warmup": 150, "thin": 1,
              "fix_sigma_s": "empirical"},
      "scenarios": [{"id": "rec", "n": 10, "rho1": 0.7, "rho2": 0.7}]
    })");
    const auto result = run("simulate --config " + ws.path("config.json") +
                            " --theta-recovery --out " + ws.path("recovery.csv"));
    REQUIRE(result.exit_code == 0);
    const std::string table = slurp_file(ws.path("recovery.csv"));
    CHECK(table.rfind("source_id,theta_true,y,y_low,y_high,ubm,", 0) == 0);
    CHECK(std::count(table.begin(), table.end(), '\n') == 11);
}

TEST_CASE("usage errors exit 2") {
    CHECK(run("estimate").exit_code == 2);              // missing --data
    CHECK(run("no-such-command").exit_code == 2);
    CHECK(run("--format yaml estimate --data x").exit_code == 2);
}
