#include <doctest.h>

#include <deque>
#include <map>
#include <set>

#include "oracles.hpp"
#include "phtrans/evalpost.hpp"

using namespace phtrans;

namespace {

Volume random_mask(Shape shape, Rng& rng, double fg_prob) {
    Volume v = Volume::make(std::move(shape), VolKind::Label);
    for (auto& x : v.data) x = rng.next_double() < fg_prob ? 1.f : 0.f;
    return v;
}

}  // namespace

TEST_CASE("connected_components: single voxel, corner adjacency, id order") {
    Volume one = Volume::make({3, 3, 3}, VolKind::Label);
    one.at(1, 1, 1) = 1.f;
    ComponentLabeling cc = connected_components(one);
    CHECK(cc.count() == 1);
    CHECK(cc.sizes[0] == 1);

    // two voxels touching only at a corner: one component under 26, two under 6
    Volume corner = Volume::make({2, 2, 2}, VolKind::Label);
    corner.at(0, 0, 0) = 1.f;
    corner.at(1, 1, 1) = 1.f;
    CHECK(connected_components(corner, 26).count() == 1);
    CHECK(connected_components(corner, 6).count() == 2);

    // ids follow first-voxel scan order
    Volume two = Volume::make({1, 1, 5}, VolKind::Label);
    two.at(0, 0, 0) = 1.f;
    two.at(0, 0, 3) = 1.f;
    two.at(0, 0, 4) = 1.f;
    ComponentLabeling c2 = connected_components(two, 6);
    CHECK(c2.ids[0] == 1);
    CHECK(c2.ids[3] == 2);
    CHECK(c2.ids[4] == 2);
    CHECK(c2.sizes == std::vector<int64_t>{1, 2});

    Volume nonbin = Volume::make({2, 2, 2}, VolKind::Label);
    nonbin.at(0, 0, 0) = 2.f;
    CHECK_THROWS_AS(connected_components(nonbin), Error);
}

TEST_CASE("connected_components: 100 random 16^3 masks match the flood-fill oracle exactly") {
    Rng rng(401);
    for (int trial = 0; trial < 100; ++trial) {
        int connectivity = trial % 3 == 0 ? 6 : trial % 3 == 1 ? 18 : 26;
        Volume mask = random_mask({16, 16, 16}, rng, 0.15 + 0.5 * rng.next_double());
        ComponentLabeling cc = connected_components(mask, connectivity);
        std::vector<int32_t> oracle = oracles::floodfill(mask, connectivity);
        // identical partition of foreground voxels
        REQUIRE(oracles::partition_of(cc.ids) == oracles::partition_of(oracle));
        // and, since both number components in first-voxel scan order, identical ids
        REQUIRE(cc.ids == oracle);
        int64_t total = 0;
        for (int64_t s : cc.sizes) total += s;
        int64_t fg = 0;
        for (float x : mask.data) fg += x != 0.f;
        CHECK(total == fg);
    }
}

TEST_CASE("connected_components: partition invariant under relabeling") {
    Rng rng(409);
    Volume mask = random_mask({12, 12, 12}, rng, 0.4);
    ComponentLabeling cc = connected_components(mask, 26);
    // relabel by a bijection; the induced partition must be unchanged
    std::vector<int32_t> remap(size_t(cc.count() + 1));
    for (int32_t i = 1; i <= cc.count(); ++i) remap[size_t(i)] = int32_t(cc.count()) + 1 - i;
    std::vector<int32_t> relabeled(cc.ids.size(), 0);
    for (size_t i = 0; i < cc.ids.size(); ++i)
        if (cc.ids[i]) relabeled[i] = remap[size_t(cc.ids[i])];
    CHECK(oracles::partition_of(relabeled) == oracles::partition_of(cc.ids));
}

TEST_CASE("keep_largest: removes non-maximal components, idempotent") {
    Volume lab = Volume::make({4, 4, 10}, VolKind::Label);
    // class 1: one blob of 10 voxels, one of 3
    for (int64_t c = 0; c < 10; ++c) lab.at(0, 0, c) = 1.f;
    for (int64_t c = 0; c < 3; ++c) lab.at(2, 2, c) = 1.f;
    // class 2: single component, must survive untouched
    for (int64_t c = 0; c < 4; ++c) lab.at(3, 3, c) = 2.f;

    Volume cleaned = keep_largest(lab, {1, 2});
    int64_t c1 = 0, c2 = 0;
    for (float x : cleaned.data) {
        c1 += x == 1.f;
        c2 += x == 2.f;
    }
    CHECK(c1 == 10);
    CHECK(c2 == 4);
    CHECK(cleaned.at(2, 2, 0) == 0.f);

    Volume again = keep_largest(cleaned, {1, 2});
    for (size_t i = 0; i < cleaned.data.size(); ++i) CHECK(again.data[i] == cleaned.data[i]);

    // property: per class, the output foreground count equals the max component size
    Rng rng(419);
    for (int trial = 0; trial < 20; ++trial) {
        Volume mask = random_mask({10, 10, 10}, rng, 0.25);
        ComponentLabeling cc = connected_components(mask, 26);
        Volume kept = keep_largest(mask, {1});
        int64_t kept_count = 0;
        for (float x : kept.data) kept_count += x == 1.f;
        int64_t expect = 0;
        for (int64_t s : cc.sizes) expect = std::max(expect, s);
        CHECK(kept_count == expect);
        // removes every non-maximal component: survivors form one component
        if (kept_count > 0) CHECK(connected_components(kept, 26).count() == 1);
    }
}

TEST_CASE("dsc: anchors, symmetry, voxel-count case") {
    Rng rng(421);
    Volume a = random_mask({8, 8, 8}, rng, 0.3);
    CHECK(dsc(a, a) == 1.0);

    Volume empty1 = Volume::make({4, 4, 4}, VolKind::Label);
    Volume empty2 = Volume::make({4, 4, 4}, VolKind::Label);
    CHECK(dsc(empty1, empty2) == 1.0);

    Volume left = Volume::make({4, 4, 4}, VolKind::Label);
    Volume right = Volume::make({4, 4, 4}, VolKind::Label);
    left.at(0, 0, 0) = 1.f;
    right.at(3, 3, 3) = 1.f;
    CHECK(dsc(left, right) == 0.0);

    // two 8-voxel cubes sharing 4 voxels: 2*4/16 = 0.5
    Volume c1 = Volume::make({4, 4, 6}, VolKind::Label);
    Volume c2 = Volume::make({4, 4, 6}, VolKind::Label);
    for (int64_t a2 = 0; a2 < 2; ++a2)
        for (int64_t b = 0; b < 2; ++b) {
            for (int64_t c = 0; c < 2; ++c) c1.at(a2, b, c) = 1.f;
            for (int64_t c = 1; c < 3; ++c) c2.at(a2, b, c) = 1.f;
        }
    CHECK(dsc(c1, c2) == 0.5);
    CHECK(dsc(c2, c1) == 0.5);

    CHECK_THROWS_AS(dsc(empty1, Volume::make({3, 3, 3}, VolKind::Label)), Error);

    // monotone under growing intersection at fixed mask sizes
    double prev = -1;
    for (int64_t shift = 3; shift >= 0; --shift) {
        Volume p1 = Volume::make({4, 4, 8}, VolKind::Label);
        Volume p2 = Volume::make({4, 4, 8}, VolKind::Label);
        for (int64_t a2 = 0; a2 < 2; ++a2)
            for (int64_t b = 0; b < 2; ++b)
                for (int64_t c = 0; c < 4; ++c) {
                    p1.at(a2, b, c) = 1.f;
                    p2.at(a2, b, c + shift) = 1.f;
                }
        double val = dsc(p1, p2);
        CHECK(val >= prev);
        prev = val;
    }
    CHECK(prev == 1.0);
}

TEST_CASE("nsd: anchors and the parallel-plates case") {
    Rng rng(431);
    Volume a = random_mask({8, 8, 8}, rng, 0.3);
    CHECK(nsd(a, a, {1, 1, 1}, 1.0) == 1.0);
    CHECK(nsd(a, a, {1, 1, 1}, 0.01) == 1.0);

    Volume empty1 = Volume::make({6, 6, 6}, VolKind::Label);
    Volume empty2 = Volume::make({6, 6, 6}, VolKind::Label);
    CHECK(nsd(empty1, empty2, {1, 1, 1}, 1.0) == 1.0);
    Volume empty_like_a = Volume::make({8, 8, 8}, VolKind::Label);
    CHECK(nsd(a, empty_like_a, {1, 1, 1}, 1.0) == 0.0);

    // two parallel 1-voxel plates distance d apart: NSD = 1 iff d <= tau
    for (int64_t d = 1; d <= 4; ++d) {
        Volume p1 = Volume::make({8, 5, 5}, VolKind::Label);
        Volume p2 = Volume::make({8, 5, 5}, VolKind::Label);
        for (int64_t b = 0; b < 5; ++b)
            for (int64_t c = 0; c < 5; ++c) {
                p1.at(1, b, c) = 1.f;
                p2.at(1 + d, b, c) = 1.f;
            }
        double tau = 2.0;
        double expect = double(d) <= tau ? 1.0 : 0.0;
        CHECK(nsd(p1, p2, {1, 1, 1}, tau) == expect);
        // spacing scales the distance
        CHECK(nsd(p1, p2, {0.4, 1, 1}, tau) == 1.0);
    }

    // masks farther apart than tau score 0
    Volume far1 = Volume::make({10, 4, 4}, VolKind::Label);
    Volume far2 = Volume::make({10, 4, 4}, VolKind::Label);
    far1.at(0, 0, 0) = 1.f;
    far2.at(9, 3, 3) = 1.f;
    CHECK(nsd(far1, far2, {1, 1, 1}, 1.0) == 0.0);
}

TEST_CASE("nsd and dsc: 50 random mask pairs against the oracles exactly") {
    Rng rng(433);
    for (int trial = 0; trial < 50; ++trial) {
        Volume p = random_mask({10, 10, 10}, rng, 0.1 + 0.4 * rng.next_double());
        Volume g = random_mask({10, 10, 10}, rng, 0.1 + 0.4 * rng.next_double());
        std::array<double, 3> spacing = {1.0, 1.0, 1.0};
        if (trial % 3 == 0) spacing = {1.5, 0.8, 1.2};
        double tau = trial % 2 == 0 ? 1.0 : 2.0;

        // dsc vs direct voxel counting
        int64_t inter = 0, np = 0, ng = 0;
        for (size_t i = 0; i < p.data.size(); ++i) {
            np += p.data[i] != 0.f;
            ng += g.data[i] != 0.f;
            inter += p.data[i] != 0.f && g.data[i] != 0.f;
        }
        double dsc_expect = (np + ng) ? 2.0 * double(inter) / double(np + ng) : 1.0;
        CHECK(std::abs(dsc(p, g) - dsc_expect) < 1e-9);

        double expect = oracles::nsd_reference(p, g, spacing, tau);
        nsd_method() = SurfaceDistanceMethod::Exhaustive;
        CHECK(std::abs(nsd(p, g, spacing, tau) - expect) < 1e-9);

        // distance-transform fast path must match the exhaustive result
        // exactly; spacings here are binary fractions so every squared
        // distance is computed without rounding on both paths
        std::array<double, 3> exact_spacing = trial % 3 == 0 ? std::array<double, 3>{1.5, 0.75, 1.25}
                                                             : std::array<double, 3>{1.0, 1.0, 1.0};
        nsd_method() = SurfaceDistanceMethod::DistanceTransform;
        double fast = nsd(p, g, exact_spacing, tau);
        nsd_method() = SurfaceDistanceMethod::Exhaustive;
        CHECK(fast == nsd(p, g, exact_spacing, tau));
    }
}

TEST_CASE("report: perfect case, absent classes, mean recomputation") {
    Rng rng(439);
    Volume gt = Volume::make({8, 8, 8}, VolKind::Label);
    for (int64_t c = 0; c < 3; ++c) gt.at(2, 2, c) = 1.f;
    for (int64_t c = 0; c < 4; ++c) gt.at(5, 5, c) = 2.f;

    SegmentationReport perfect = report({{gt, gt}}, {"A", "B", "C"});
    for (double v : perfect.dsc_rows[0]) CHECK(v == 1.0);  // class C absent from both: scores 1
    for (double v : perfect.nsd_rows[0]) CHECK(v == 1.0);
    CHECK(perfect.mean_dsc == 1.0);

    Volume pred = gt;
    pred.at(5, 5, 3) = 0.f;  // clip one voxel of class 2
    SegmentationReport rep = report({{pred, gt}, {gt, gt}}, {"A", "B"});
    CHECK(rep.dsc_rows[0][0] == 1.0);
    CHECK(rep.dsc_rows[0][1] == doctest::Approx(2.0 * 3 / 7.0));
    // mean column equals the arithmetic mean of class columns
    double m = 0;
    for (double v : rep.class_mean_dsc) m += v;
    CHECK(rep.mean_dsc == doctest::Approx(m / 2.0));

    std::string csv = rep.to_csv();
    CHECK(csv.find("case,metric,Mean,A,B") == 0);
    std::string table = rep.to_table();
    CHECK(table.find("Mean") != std::string::npos);

    // table column order for the 13-organ layout
    SegmentationReport organ = report({{gt, gt}}, flare_organ_names());
    std::string header = organ.to_csv().substr(0, organ.to_csv().find('\n'));
    CHECK(header ==
          "case,metric,Mean,Liver,RK,Spleen,Pancreas,Aorta,IVC,RAG,LAG,Gallbladder,Esophagus,Stomach,Duodenum,LK");

    CHECK_THROWS_AS(report({{pred, Volume::make({2, 2, 2}, VolKind::Label)}}, {"A"}), Error);
}

TEST_CASE("metrics survive a resample round trip on convex masks") {
    // a convex blob downsampled then upsampled stays close to itself
    Volume mask = Volume::make({16, 16, 16}, VolKind::Label);
    for (int64_t a = 4; a < 12; ++a)
        for (int64_t b = 4; b < 12; ++b)
            for (int64_t c = 4; c < 12; ++c) mask.at(a, b, c) = 1.f;
    Volume down = resample(mask, {8, 8, 8}, Interp::Nearest);
    Volume up = resample(down, {16, 16, 16}, Interp::Nearest);
    CHECK(dsc(up, mask) >= 0.9);
    CHECK(nsd(up, mask, {1, 1, 1}, 2.0) >= 0.9);
}
