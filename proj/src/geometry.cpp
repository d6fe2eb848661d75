#include "pointrel/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstdlib>
#include <sstream>

namespace pointrel {

namespace {

void check_finite_coords(const double* data, std::size_t count, const char* who) {
    for (std::size_t i = 0; i < count; ++i)
        if (!std::isfinite(data[i]))
            throw NumericError(std::string(who) + ": non-finite coordinate at flat index " +
                               std::to_string(i));
}

}  // namespace

std::vector<double> pairwise_sq_dist(const std::vector<double>& xyz, std::size_t n) {
    if (n == 0 || xyz.size() != n * 3)
        throw DimensionError("pairwise_sq_dist: expected n*3 coordinates");
    check_finite_coords(xyz.data(), xyz.size(), "pairwise_sq_dist");
    std::vector<double> d(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double* pi = xyz.data() + i * 3;
        for (std::size_t j = i + 1; j < n; ++j) {
            const double* pj = xyz.data() + j * 3;
            const double dx = pi[0] - pj[0], dy = pi[1] - pj[1], dz = pi[2] - pj[2];
            double v = dx * dx + dy * dy + dz * dz;
            if (v < 0.0) v = 0.0;
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    return d;
}

NeighborIndex knn_general(const double* data, std::size_t n, std::size_t dim, std::size_t k) {
    if (n == 0) throw DomainError("knn: empty point set");
    if (k < 1 || k > n)
        throw DomainError("knn: k = " + std::to_string(k) + " outside [1, " + std::to_string(n) +
                          "]");
    check_finite_coords(data, n * dim, "knn");

    NeighborIndex out;
    out.n = n;
    out.k = k;
    out.idx.assign(n * k, 0);

    // Distances via plain per-pair loops: each squared distance is a fixed
    // arithmetic expression of its two points, so the neighbor tables do not
    // depend on buffer addresses the way dense-product kernels can.
    std::vector<std::pair<double, std::uint32_t>> cand;
    cand.reserve(n);
    auto cmp = [](const std::pair<double, std::uint32_t>& a,
                  const std::pair<double, std::uint32_t>& b) {
        if (a.first != b.first) return a.first < b.first;
        return a.second < b.second;
    };

    for (std::size_t i = 0; i < n; ++i) {
        const double* pi = data + i * dim;
        cand.clear();
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            const double* pj = data + j * dim;
            double d2 = 0.0;
            for (std::size_t c = 0; c < dim; ++c) {
                const double d = pi[c] - pj[c];
                d2 += d * d;
            }
            cand.emplace_back(d2, static_cast<std::uint32_t>(j));
        }
        const std::size_t keep = k - 1;  // slot 0 is the point itself
        if (keep > 0 && keep < cand.size())
            std::nth_element(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(keep) - 1,
                             cand.end(), cmp);
        const std::size_t take = std::min(keep, cand.size());
        std::sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(take), cmp);
        out.idx[i * k] = static_cast<std::uint32_t>(i);
        for (std::size_t j = 0; j < take; ++j) out.idx[i * k + 1 + j] = cand[j].second;
    }
    return out;
}

NeighborIndex knn_subset(const std::vector<double>& xyz, std::size_t n,
                         const std::vector<std::uint32_t>& centers, std::size_t k) {
    if (n == 0 || xyz.size() != n * 3)
        throw DimensionError("knn_subset: expected n*3 coordinates");
    if (centers.empty()) throw DomainError("knn_subset: empty center list");
    if (k < 1 || k > n)
        throw DomainError("knn_subset: k = " + std::to_string(k) + " outside [1, " +
                          std::to_string(n) + "]");
    check_finite_coords(xyz.data(), xyz.size(), "knn_subset");

    NeighborIndex out;
    out.n = centers.size();
    out.k = k;
    out.idx.assign(centers.size() * k, 0);

    std::vector<std::pair<double, std::uint32_t>> cand;
    cand.reserve(n);
    auto cmp = [](const std::pair<double, std::uint32_t>& a,
                  const std::pair<double, std::uint32_t>& b) {
        if (a.first != b.first) return a.first < b.first;
        return a.second < b.second;
    };
    for (std::size_t r = 0; r < centers.size(); ++r) {
        const std::size_t c = centers[r];
        if (c >= n) throw IndexError("knn_subset: center index out of range");
        const double* pc = xyz.data() + c * 3;
        cand.clear();
        for (std::size_t j = 0; j < n; ++j) {
            if (j == c) continue;
            const double* pj = xyz.data() + j * 3;
            const double dx = pc[0] - pj[0], dy = pc[1] - pj[1], dz = pc[2] - pj[2];
            double d2 = dx * dx + dy * dy + dz * dz;
            if (d2 < 0.0) d2 = 0.0;
            cand.emplace_back(d2, static_cast<std::uint32_t>(j));
        }
        const std::size_t keep = k - 1;  // slot 0 is the center itself
        if (keep > 0 && keep < cand.size())
            std::nth_element(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(keep) - 1,
                             cand.end(), cmp);
        const std::size_t take = std::min(keep, cand.size());
        std::sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(take), cmp);
        out.idx[r * k] = static_cast<std::uint32_t>(c);
        for (std::size_t j = 0; j < take; ++j) out.idx[r * k + 1 + j] = cand[j].second;
    }
    return out;
}

std::vector<std::uint32_t> fps(const std::vector<double>& xyz, std::size_t n, std::size_t S,
                               std::size_t seed_index) {
    if (n == 0 || xyz.size() != n * 3) throw DimensionError("fps: expected n*3 coordinates");
    if (S < 1 || S > n)
        throw DomainError("fps: S = " + std::to_string(S) + " outside [1, " + std::to_string(n) +
                          "]");
    if (seed_index >= n) throw IndexError("fps: seed_index out of range");
    check_finite_coords(xyz.data(), xyz.size(), "fps");

    std::vector<std::uint32_t> chosen;
    chosen.reserve(S);
    chosen.push_back(static_cast<std::uint32_t>(seed_index));

    std::vector<double> mind2(n, std::numeric_limits<double>::infinity());
    auto sq = [&](std::size_t a, std::size_t b) {
        const double* pa = xyz.data() + a * 3;
        const double* pb = xyz.data() + b * 3;
        const double dx = pa[0] - pb[0], dy = pa[1] - pb[1], dz = pa[2] - pb[2];
        return dx * dx + dy * dy + dz * dz;
    };
    std::size_t last = seed_index;
    while (chosen.size() < S) {
        for (std::size_t j = 0; j < n; ++j) {
            const double d2 = sq(last, j);
            if (d2 < mind2[j]) mind2[j] = d2;
        }
        std::size_t best = 0;
        double bestd = -1.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (mind2[j] > bestd) {  // strict '>' keeps the lowest index on ties
                bestd = mind2[j];
                best = j;
            }
        }
        chosen.push_back(static_cast<std::uint32_t>(best));
        last = best;
    }
    return chosen;
}

std::array<double, 3> idw_weights(const double* query, const double* anchors) {
    std::array<double, 3> d2{};
    for (int u = 0; u < 3; ++u) {
        const double dx = query[0] - anchors[u * 3 + 0];
        const double dy = query[1] - anchors[u * 3 + 1];
        const double dz = query[2] - anchors[u * 3 + 2];
        d2[u] = dx * dx + dy * dy + dz * dz;
    }
    int nearest = 0;
    for (int u = 1; u < 3; ++u)
        if (d2[u] < d2[nearest]) nearest = u;
    if (d2[nearest] < 1e-20) {
        std::array<double, 3> w{0.0, 0.0, 0.0};
        w[nearest] = 1.0;
        return w;
    }
    std::array<double, 3> lam{1.0 / d2[0], 1.0 / d2[1], 1.0 / d2[2]};
    const double s = lam[0] + lam[1] + lam[2];
    return {lam[0] / s, lam[1] / s, lam[2] / s};
}

// ---------------------------------------------------------------------------
// XYZL io
// ---------------------------------------------------------------------------

PointCloud load_xyzl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open point-cloud file: " + path);
    PointCloud cloud;
    std::vector<int> labels;
    bool any_label = false;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        std::vector<std::string> tok;
        for (std::string t; ls >> t;) tok.push_back(std::move(t));
        if (tok.empty()) continue;  // blank or comment-only line
        if (tok.size() != 3 && tok.size() != 4)
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected 'x y z [label]'");
        double coord[3];
        for (int c = 0; c < 3; ++c) {
            // strtod (unlike istream extraction) accepts "nan"/"inf" spellings,
            // which we must see in order to reject them.
            char* end = nullptr;
            coord[c] = std::strtod(tok[c].c_str(), &end);
            if (end == tok[c].c_str() || *end != '\0')
                throw ConfigError(path + ":" + std::to_string(lineno) + ": bad number '" + tok[c] +
                                  "'");
            if (!std::isfinite(coord[c]))
                throw NumericError(path + ":" + std::to_string(lineno) + ": non-finite coordinate");
        }
        if (tok.size() == 4) {
            char* end = nullptr;
            const long lab = std::strtol(tok[3].c_str(), &end, 10);
            if (end == tok[3].c_str() || *end != '\0')
                throw ConfigError(path + ":" + std::to_string(lineno) + ": bad label '" + tok[3] +
                                  "'");
            any_label = true;
            labels.push_back(static_cast<int>(lab));
        } else {
            labels.push_back(-1);
        }
        cloud.xyz.push_back(coord[0]);
        cloud.xyz.push_back(coord[1]);
        cloud.xyz.push_back(coord[2]);
    }
    cloud.n = cloud.xyz.size() / 3;
    if (cloud.n == 0) throw ConfigError(path + ": no points");
    if (any_label) cloud.point_labels = std::move(labels);
    return cloud;
}

void save_xyzl(const PointCloud& cloud, const std::string& path) {
    std::ostringstream os;
    os.precision(17);
    const bool labeled = !cloud.point_labels.empty();
    for (std::size_t i = 0; i < cloud.n; ++i) {
        os << cloud.xyz[i * 3] << ' ' << cloud.xyz[i * 3 + 1] << ' ' << cloud.xyz[i * 3 + 2];
        if (labeled) os << ' ' << cloud.point_labels[i];
        os << '\n';
    }
    atomic_write_text(path, os.str());
}

}  // namespace pointrel
