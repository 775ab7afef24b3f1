#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "focusdpo/dipgen.hpp"
#include "focusdpo/error.hpp"

using namespace focusdpo;
using namespace focusdpo::dip;
namespace fs = std::filesystem;

namespace {

DipConfig small_config(std::size_t single = 20, std::size_t multi = 20) {
    DipConfig cfg;
    cfg.single_pairs = single;
    cfg.multi_pairs = multi;
    return cfg;
}

const Dataset& corpus() {
    static const Dataset d = generate_corpus(small_config(), 7);
    return d;
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("focusdpo_dipgen_" + name);
    fs::remove_all(p);
    return p;
}

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (!e.is_regular_file()) continue;
        std::ifstream in(e.path(), std::ios::binary);
        std::ostringstream ss;
        ss << in.rdbuf();
        out[fs::relative(e.path(), root).string()] = ss.str();
    }
    return out;
}

std::size_t components(const BinaryMask& m) {
    std::vector<int> seen(m.size(), 0);
    std::size_t n = 0;
    for (std::size_t s = 0; s < m.size(); ++s) {
        if (!m[s] || seen[s]) continue;
        ++n;
        std::vector<std::size_t> stack{s};
        seen[s] = 1;
        while (!stack.empty()) {
            const std::size_t i = stack.back();
            stack.pop_back();
            const std::size_t r = i / m.cols(), c = i % m.cols();
            const std::size_t nbr[4] = {r > 0 ? i - m.cols() : i, r + 1 < m.rows() ? i + m.cols() : i,
                                        c > 0 ? i - 1 : i, c + 1 < m.cols() ? i + 1 : i};
            for (std::size_t j : nbr)
                if (m[j] && !seen[j]) {
                    seen[j] = 1;
                    stack.push_back(j);
                }
        }
    }
    return n;
}

}  // namespace

TEST_CASE("every record satisfies the dataset contracts") {
    REQUIRE(corpus().size() == 40);
    double in_dist = 0.0, out_dist = 0.0;
    for (const auto& q : corpus()) {
        CHECK(q.m_prior.count() > 0);
        CHECK(q.score_w >= 9.0);
        CHECK(q.score_l <= 6.0);
        const GateResult g = quality_gate(q);
        CHECK(g.accept);
        CHECK(g.score_w == q.score_w);
        CHECK(q.reference_count() == q.subjects.size());
        CHECK(q.x0_w.dims() == q.x0_l.dims());

        const Tensor support = prior_pixel_support(q);
        double in_sq = 0.0, out_sq = 0.0;
        std::size_t in_n = 0, out_n = 0;
        for (std::size_t i = 0; i < q.x0_w.size(); ++i) {
            CHECK((q.x0_w[i] >= 0.0 && q.x0_w[i] <= 1.0));
            CHECK((q.x0_l[i] >= 0.0 && q.x0_l[i] <= 1.0));
            const double d = q.x0_w[i] - q.x0_l[i];
            if (support[i] != 0.0) {
                in_sq += d * d;
                ++in_n;
            } else {
                CHECK(q.x0_w[i] == q.x0_l[i]);
                out_sq += d * d;
                ++out_n;
            }
        }
        in_dist += std::sqrt(in_sq / static_cast<double>(in_n));
        out_dist += out_n ? std::sqrt(out_sq / static_cast<double>(out_n)) : 0.0;
    }
    CHECK(in_dist > 0.0);
    CHECK(in_dist > 10.0 * out_dist);
}

TEST_CASE("reference crops and winning images use different backgrounds") {
    for (const auto& q : corpus()) {
        // Corner pixels are background in both; the two backgrounds never coincide.
        CHECK(q.x_r.at(0, 0, 0) != q.x0_w.at(0, 0));
    }
}

TEST_CASE("single circle gives one connected prior component") {
    DipConfig cfg = small_config();
    Rng rng(3);
    for (int trial = 0; trial < 30; ++trial) {
        auto subjects = random_subjects(rng, 1, cfg);
        subjects[0].shape = Shape::circle;
        const auto q = synthesize_pair(subjects, rng.next_u64(), 1, cfg);
        CHECK(components(q.m_prior) == 1);
        // Any-coverage: every subject pixel lies in a prior token.
        const Tensor support = prior_pixel_support(q);
        const Tensor visible = subject_supports(q)[0];
        for (std::size_t i = 0; i < visible.size(); ++i)
            if (visible[i] != 0.0) CHECK(support[i] == 1.0);
    }
}

TEST_CASE("quality gate scoring") {
    DipConfig cfg = small_config();
    Rng rng(4);
    SECTION("unperturbed winners score 10") {
        for (const auto& q : corpus())
            if (q.subjects.size() == 1) CHECK(q.score_w == 10.0);
    }
    SECTION("zero strength yields a degenerate negative") {
        cfg.strength = 0.0;
        cfg.strength_jitter = 0.0;
        for (int trial = 0; trial < 20; ++trial) {
            const auto subjects = random_subjects(rng, 1, cfg);
            const auto q = synthesize_pair(subjects, rng.next_u64(), 1, cfg);
            const GateResult g = quality_gate(q);
            CHECK(g.score_l == g.score_w);
            CHECK_FALSE(g.accept);
        }
    }
    SECTION("attribute distance") {
        SubjectSpec s;
        CHECK(attribute_distance(s, nullptr) == 0.0);
        SubjectPerturbation p;
        p.kind = PerturbationKind::shape_morph;
        p.strength = 0.7;
        p.morph_shape = s.shape;
        CHECK(attribute_distance(s, &p) == 0.0);
        p.morph_shape = Shape::square;
        CHECK(attribute_distance(s, &p) == 0.7);
    }
}

TEST_CASE("acceptance rate rises with perturbation strength and plateaus") {
    std::vector<double> rates;
    for (double strength = 0.0; strength <= 1.0 + 1e-9; strength += 0.1) {
        DipConfig cfg = small_config();
        cfg.strength = strength;
        Rng rng(5);
        int accepted = 0;
        const int n = 200;
        for (int i = 0; i < n; ++i) {
            const auto subjects = random_subjects(rng, 1, cfg);
            accepted += quality_gate(synthesize_pair(subjects, rng.next_u64(), 1, cfg)).accept;
        }
        rates.push_back(static_cast<double>(accepted) / n);
    }
    INFO("rates: " << Catch::Detail::stringify(rates));
    CHECK(rates.front() == 0.0);
    for (std::size_t i = 1; i < rates.size(); ++i) CHECK(rates[i] >= rates[i - 1] - 0.05);
    CHECK(rates.back() > 0.5);
    const std::size_t last = rates.size() - 1;
    CHECK(std::abs(rates[last] - rates[last - 2]) <= 0.1);
}

TEST_CASE("dataset round trip and reproducibility") {
    const fs::path a = scratch("a"), b = scratch("b");
    const Manifest m = write_dataset(corpus(), a);
    CHECK(m.pair_count == corpus().size());
    std::size_t dirs = 0;
    for (const auto& e : fs::directory_iterator(a)) dirs += e.is_directory();
    CHECK(dirs == m.pair_count);

    const Dataset back = read_dataset(a);
    REQUIRE(back.size() == corpus().size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].x_r == corpus()[i].x_r);
        CHECK(back[i].x0_w == corpus()[i].x0_w);
        CHECK(back[i].x0_l == corpus()[i].x0_l);
        CHECK(back[i].m_prior == corpus()[i].m_prior);
        CHECK(back[i].subjects == corpus()[i].subjects);
        CHECK(back[i].provenance == corpus()[i].provenance);
        CHECK(back[i].score_l == corpus()[i].score_l);
    }
    CHECK(dataset_fingerprint(back) == dataset_fingerprint(corpus()));

    write_dataset(generate_corpus(small_config(), 7), b);
    CHECK(tree_bytes(a) == tree_bytes(b));
    CHECK(dataset_fingerprint(generate_corpus(small_config(), 8)) != dataset_fingerprint(corpus()));
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("held-out split") {
    const Dataset big = generate_corpus(small_config(100, 100), 11);
    const auto split = split_dataset(big);
    CHECK(split.train.size() + split.heldout.size() == big.size());
    CHECK(split.heldout.size() >= 10);
    CHECK(split.heldout.size() <= 30);
    for (const auto& q : split.heldout) CHECK(is_heldout(q.id));
    for (const auto& q : split.train) CHECK_FALSE(is_heldout(q.id));
}

TEST_CASE("dipgen error paths") {
    DipConfig cfg = small_config();
    cfg.strength = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.image_size = 30;
    CHECK_THROWS_AS(generate_corpus(cfg, 1), ConfigError);

    Rng rng(6);
    auto subjects = random_subjects(rng, 3, small_config());
    CHECK_THROWS_AS(synthesize_pair(subjects, 1, 4, small_config()), ConfigError);
    CHECK_THROWS_AS(synthesize_pair(subjects, 1, 0, small_config()), ConfigError);
    subjects[0].frequency = 0.5;
    CHECK_THROWS_AS(synthesize_pair(subjects, 1, 1, small_config()), ConfigError);

    const fs::path empty = scratch("empty");
    fs::create_directories(empty);
    CHECK_THROWS_AS(read_dataset(empty), DataError);
    std::ofstream(empty / "manifest.jsonl") << "{not json\n";
    CHECK_THROWS_AS(read_dataset(empty), DataError);
    fs::remove_all(empty);

    Dataset rejected{corpus().front()};
    rejected.front().x0_l = rejected.front().x0_w;
    rejected.front().provenance.perturbations.clear();
    CHECK_THROWS_AS(write_dataset(rejected, scratch("rejected")), DataError);
    fs::remove_all(scratch("rejected"));
}
