#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "lesionkit/imageproc.hpp"
#include "oracle.hpp"
#include "testgen.hpp"

using namespace lesionkit;

namespace {

// Uniform disc on black background.
FundusImage disc_image(int size, double radius_frac, float r, float g, float b) {
    FundusImage img("disc", size, size);
    double c = size * 0.5, rad = radius_frac * size;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            double dx = (x + 0.5) - c, dy = (y + 0.5) - c;
            if (dx * dx + dy * dy <= rad * rad) {
                img.at(x, y, 0) = r;
                img.at(x, y, 1) = g;
                img.at(x, y, 2) = b;
            }
        }
    return img;
}

BinaryMask dilate_bruteforce(const BinaryMask& mask, int kernel, int iterations) {
    int half = kernel / 2;
    BinaryMask cur = mask;
    for (int it = 0; it < iterations; ++it) {
        BinaryMask next(mask.width(), mask.height());
        for (int y = 0; y < mask.height(); ++y)
            for (int x = 0; x < mask.width(); ++x) {
                bool any = false;
                for (int dy = -half; dy <= half && !any; ++dy)
                    for (int dx = -half; dx <= half && !any; ++dx) {
                        int sx = x + dx, sy = y + dy;
                        if (sx >= 0 && sy >= 0 && sx < mask.width() && sy < mask.height() &&
                            cur.get(sx, sy))
                            any = true;
                    }
                if (any) next.set(x, y);
            }
        cur = next;
    }
    return cur;
}

}  // namespace

TEST_SUITE_BEGIN("imageproc");

TEST_CASE("dilate_mask square growth") {
    BinaryMask m(32, 32);
    m.set(16, 16);
    CHECK(dilate_mask(m, 5, 1).count() == 25);
    CHECK(dilate_mask(m, 5, 2).count() == 81);

    BinaryMask corner(32, 32);
    corner.set(0, 0);
    CHECK(dilate_mask(corner, 5, 1).count() == 9);  // clipped at the border

    BinaryMask empty(8, 8);
    CHECK(dilate_mask(empty, 5, 2).count() == 0);
    CHECK_THROWS_AS(dilate_mask(m, 4, 1), ValidationError);
    CHECK(dilate_mask(m, 5, 0) == m);
}

TEST_CASE("dilation matches brute force and composes") {
    Rng rng(31337);
    for (int k = 0; k < 100; ++k) {
        BinaryMask m(32, 32);
        int bits = rng.uniform_int(0, 40);
        for (int b = 0; b < bits; ++b) m.set(rng.uniform_int(0, 31), rng.uniform_int(0, 31));

        BinaryMask once = dilate_mask(m, 5, 1);
        CHECK(once == dilate_bruteforce(m, 5, 1));

        // Twice with k=5 equals once with k=9.
        CHECK(dilate_mask(m, 5, 2) == dilate_mask(m, 9, 1));

        // Monotone: every input bit survives.
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x)
                if (m.get(x, y)) CHECK(once.get(x, y));
    }
}

TEST_CASE("split_instances partitions the mask") {
    BinaryMask empty(16, 16);
    CHECK(split_instances(empty, LesionKind::EX).empty());

    BinaryMask two(16, 16);
    // 3-pixel blob and 5-pixel blob, well separated.
    two.set(1, 1);
    two.set(2, 1);
    two.set(2, 2);
    for (int x = 8; x < 13; ++x) two.set(x, 9);
    auto insts = split_instances(two, LesionKind::MA);
    REQUIRE(insts.size() == 2);
    CHECK(insts[0].mask.count() == 3);
    CHECK(insts[1].mask.count() == 5);
    CHECK(BinaryMask::intersection_count(insts[0].mask, insts[1].mask) == 0);
    CHECK(insts[0].kind == LesionKind::MA);

    Rng rng(5);
    BinaryMask single = testgen::random_blob(rng, 16, 16);
    auto one = split_instances(single, LesionKind::EX);
    // A random rectangle-fill blob may fragment; union must still equal input.
    std::size_t total = 0;
    for (const auto& inst : one) total += inst.mask.count();
    CHECK(total == single.count());
}

TEST_CASE("split_instances agrees with the flood-fill oracle") {
    Rng rng(99);
    for (int k = 0; k < 100; ++k) {
        BinaryMask m(24, 24);
        int bits = rng.uniform_int(0, 80);
        for (int b = 0; b < bits; ++b) m.set(rng.uniform_int(0, 23), rng.uniform_int(0, 23));

        auto comps = oracle::flood_fill_components(m);
        auto insts = split_instances(m, LesionKind::EX);
        REQUIRE(insts.size() == comps.size());

        // Union equals input, instances pairwise disjoint, bboxes tight.
        BinaryMask unioned(24, 24);
        std::size_t total = 0;
        for (const auto& inst : insts) {
            total += inst.mask.count();
            for (int y = 0; y < 24; ++y)
                for (int x = 0; x < 24; ++x)
                    if (inst.mask.get(x, y)) unioned.set(x, y);
            CHECK(inst.box == tight_bbox(inst.mask));
        }
        CHECK(unioned == m);
        CHECK(total == m.count());

        // Component pixel sets match the oracle (as sets of sorted flat lists).
        std::vector<std::vector<int>> got;
        for (const auto& inst : insts) {
            std::vector<int> pixels;
            for (int y = 0; y < 24; ++y)
                for (int x = 0; x < 24; ++x)
                    if (inst.mask.get(x, y)) pixels.push_back(y * 24 + x);
            got.push_back(std::move(pixels));
        }
        std::sort(got.begin(), got.end());
        std::sort(comps.begin(), comps.end());
        CHECK(got == comps);
    }
}

TEST_CASE("split_instances output is sorted by (y_min, x_min)") {
    Rng rng(7);
    for (int k = 0; k < 20; ++k) {
        BinaryMask m(32, 32);
        int bits = rng.uniform_int(5, 60);
        for (int b = 0; b < bits; ++b) m.set(rng.uniform_int(0, 31), rng.uniform_int(0, 31));
        auto insts = split_instances(m, LesionKind::EX);
        for (std::size_t i = 1; i < insts.size(); ++i)
            CHECK(std::pair(insts[i - 1].box.y_min, insts[i - 1].box.x_min) <=
                  std::pair(insts[i].box.y_min, insts[i].box.x_min));
    }
}

TEST_CASE("normalize_image resizes to the target") {
    FundusImage img("big", 128, 96);
    double cx = 64, cy = 48, rad = 40;
    for (int y = 0; y < 96; ++y)
        for (int x = 0; x < 128; ++x) {
            double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
            if (dx * dx + dy * dy <= rad * rad) {
                img.at(x, y, 0) = 0.6f;
                img.at(x, y, 1) = 0.4f;
                img.at(x, y, 2) = 0.3f;
            }
        }
    PreprocessParams p;
    p.target_size = 64;
    FundusImage out = normalize_image(img, p);
    CHECK(out.width == 64);
    CHECK(out.height == 64);
}

TEST_CASE("uniform gray disc maps to the neutral level") {
    FundusImage img = disc_image(96, 0.45, 0.5f, 0.5f, 0.5f);
    PreprocessParams p;
    p.target_size = 96;
    NormalizeTransform t = compute_normalization(img, p);
    FundusImage out = apply_normalization(img, t);
    double rlim = t.crop_radius(), oc = t.out_center();
    for (int y = 0; y < 96; ++y)
        for (int x = 0; x < 96; ++x) {
            double dx = x + 0.5 - oc, dy = y + 0.5 - oc;
            double d = std::sqrt(dx * dx + dy * dy);
            if (d < 0.9 * rlim) {
                CHECK(out.at(x, y, 1) == doctest::Approx(0.5).epsilon(5e-3));
            } else if (d > rlim + 1.0) {
                CHECK(out.at(x, y, 0) == 0.0f);
                CHECK(out.at(x, y, 1) == 0.0f);
                CHECK(out.at(x, y, 2) == 0.0f);
            }
        }
}

TEST_CASE("planted bright blob stays brighter than its surround") {
    int n = 96;
    FundusImage img = disc_image(n, 0.45, 0.5f, 0.35f, 0.25f);
    // Blob at a known off-center spot.
    int bx = 38, by = 52;
    for (int y = by - 2; y <= by + 2; ++y)
        for (int x = bx - 2; x <= bx + 2; ++x)
            for (int c = 0; c < 3; ++c) img.at(x, y, c) = std::min(1.0f, img.at(x, y, c) + 0.25f);

    PreprocessParams p;
    p.target_size = n;
    NormalizeTransform t = compute_normalization(img, p);
    FundusImage out = apply_normalization(img, t);

    // Map the blob center through the geometric transform.
    double oc = t.out_center();
    int ox = static_cast<int>(std::lround((bx + 0.5 - t.in_cx) * t.scale() + oc - 0.5));
    int oy = static_cast<int>(std::lround((by + 0.5 - t.in_cy) * t.scale() + oc - 0.5));
    double center = out.at(ox, oy, 1);
    double surround = out.at(ox + 12, oy + 12, 1);
    CHECK(center > surround);

    // Reference value from a direct full-precision masked convolution.
    std::vector<double> values(static_cast<std::size_t>(n) * n), weight(values.size());
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            std::size_t i = static_cast<std::size_t>(y) * n + x;
            values[i] = out.at(x, y, 1);
            weight[i] = 1.0;
        }
    auto mean = masked_gaussian_mean(values, weight, n, n, 4.0);
    CHECK(mean[static_cast<std::size_t>(oy) * n + ox] > 0.5);
}

TEST_CASE("normalization is idempotent on size and circular support") {
    FundusImage img = disc_image(120, 0.40, 0.55f, 0.35f, 0.2f);
    PreprocessParams p;
    p.target_size = 80;
    FundusImage once = normalize_image(img, p);
    FundusImage twice = normalize_image(once, p);
    CHECK(once.width == twice.width);
    CHECK(once.height == twice.height);
    NormalizeTransform t = compute_normalization(img, p);
    double rlim = t.crop_radius(), oc = t.out_center();
    for (int y = 0; y < 80; ++y)
        for (int x = 0; x < 80; ++x) {
            double dx = x + 0.5 - oc, dy = y + 0.5 - oc;
            if (dx * dx + dy * dy > (rlim + 1.0) * (rlim + 1.0)) {
                bool zero_once = once.at(x, y, 0) == 0 && once.at(x, y, 1) == 0 && once.at(x, y, 2) == 0;
                bool zero_twice =
                    twice.at(x, y, 0) == 0 && twice.at(x, y, 1) == 0 && twice.at(x, y, 2) == 0;
                CHECK(zero_once);
                CHECK(zero_once == zero_twice);
            }
        }
}

TEST_CASE("normalize rejects images without a detectable disc") {
    FundusImage black("black", 32, 32);
    PreprocessParams p;
    p.target_size = 32;
    CHECK_THROWS_AS(normalize_image(black, p), DegenerateInputError);
}

TEST_CASE("mask transform follows the image geometry") {
    FundusImage img = disc_image(100, 0.45, 0.6f, 0.4f, 0.3f);
    PreprocessParams p;
    p.target_size = 100;
    NormalizeTransform t = compute_normalization(img, p);
    BinaryMask mask(100, 100);
    for (int y = 45; y < 55; ++y)
        for (int x = 45; x < 55; ++x) mask.set(x, y);
    BinaryMask out = apply_normalization(mask, t);
    CHECK(out.any());
    // The center block stays centered.
    BoundingBox b = tight_bbox(out);
    CHECK(std::abs((b.x_min + b.x_max) / 2 - 50) <= 2);
    CHECK(std::abs((b.y_min + b.y_max) / 2 - 50) <= 2);
}

TEST_CASE("overlay draws exactly the perimeter for a box-only detection") {
    FundusImage img("img", 40, 40, 0.5f);
    DetectionSet dets{"img", {Detection::make(LesionKind::EX, 0.9, {5, 7, 15, 20})}};
    FundusImage out = render_overlay(img, dets);

    int red_changed = 0;
    for (int y = 0; y < 40; ++y)
        for (int x = 0; x < 40; ++x)
            if (out.at(x, y, 0) != img.at(x, y, 0)) ++red_changed;
    int w = 10, h = 13;
    CHECK(red_changed == 2 * w + 2 * h - 4);

    DetectionSet empty{"img", {}};
    FundusImage same = render_overlay(img, empty);
    CHECK(same.pixels == img.pixels);

    DetectionSet outside{"img", {Detection::make(LesionKind::MA, 0.5, {30, 30, 45, 45})}};
    CHECK_THROWS_AS(render_overlay(img, outside), ValidationError);
}

TEST_CASE("overlay blends mask pixels at one half") {
    FundusImage img("img", 20, 20, 0.25f);
    BinaryMask mask(20, 20);
    for (int y = 8; y < 12; ++y)
        for (int x = 8; x < 12; ++x) mask.set(x, y);
    DetectionSet dets{"img", {Detection::make(LesionKind::EX, 1.0, {}, mask)}};
    FundusImage out = render_overlay(img, dets);
    // Interior mask pixel, not on the box perimeter: 0.5*0.25 + 0.5*color.
    CHECK(out.at(9, 9, 0) == doctest::Approx(0.5 * 0.25 + 0.5 * 1.0));
    CHECK(out.at(9, 9, 1) == doctest::Approx(0.5 * 0.25));
    CHECK(out.at(9, 9, 2) == doctest::Approx(0.5 * 0.25));
}

TEST_SUITE_END();
