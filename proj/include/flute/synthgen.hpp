#pragma once

// Synthetic ground truth and per-client datasets.

#include "flute/numerics.hpp"
#include "flute/parallel.hpp"

#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace flute {

/// Stacked local models Phi (column i is client i's regressor) with its SVD.
struct GroundTruth {
    Matrix phi;
    SvdResult svd;
    FullBases bases;

    static GroundTruth from_phi(Matrix phi) {
        GroundTruth gt;
        gt.svd = full_svd(phi);
        gt.bases = full_bases(phi);
        gt.phi = std::move(phi);
        return gt;
    }

    Index d() const { return phi.rows(); }
    Index clients() const { return phi.cols(); }
    Index d_under() const { return std::min(phi.rows(), phi.cols()); }
    Index d_over() const { return std::max(phi.rows(), phi.cols()); }

    /// lambda_i with 1-based index; zero beyond d_under.
    double lambda(Index i) const {
        return (i >= 1 && i <= svd.singular_values.size()) ? svd.singular_values(i - 1) : 0.0;
    }

    /// 2 (lambda_k - lambda_{k+1}).
    double delta_k(Index k) const { return 2.0 * (lambda(k) - lambda(k + 1)); }

    /// True when the k-th gap is zero up to rounding (1e-12 relative to lambda_1).
    bool gap_degenerate(Index k) const { return delta_k(k) <= 2e-12 * lambda(1); }

    double energy() const { return svd.singular_values.squaredNorm(); }
};

/// lambda_i = 2 d_under / (i + 1); U, V from QR of seeded Gaussians.
inline GroundTruth make_ground_truth(Index d, Index clients, std::uint64_t seed) {
    if (d < 1 || clients < 1) {
        throw std::invalid_argument("make_ground_truth: d and M must be >= 1");
    }
    const Index r = std::min(d, clients);
    const Matrix u = orthonormal_columns(seeded_gaussian(d, r, 1.0, make_stream(seed, StreamPurpose::kGroundTruthLeft)));
    const Matrix v =
        orthonormal_columns(seeded_gaussian(clients, r, 1.0, make_stream(seed, StreamPurpose::kGroundTruthRight)));
    Vector lambda(r);
    for (Index i = 0; i < r; ++i) {
        lambda(i) = 2.0 * static_cast<double>(r) / static_cast<double>(i + 2);
    }
    return GroundTruth::from_phi(u * lambda.asDiagonal() * v.transpose());
}

struct ClientShard {
    std::size_t index = 0;
    Matrix x;  // N x d
    Vector y;  // N
    double sigma2 = 0.0;

    Index samples() const { return x.rows(); }

    /// E_i = y - X phi_i.
    Vector recovered_noise(const GroundTruth& gt) const {
        return y - x * gt.phi.col(static_cast<Index>(index));
    }
};

/// One shard per column of Phi: rows of X ~ N(0, I_d), y = X phi_i + xi,
/// xi ~ N(0, sigma2). Client i reads only its own stream.
inline std::vector<ClientShard> make_client_shards(const GroundTruth& gt, Index samples, double sigma2,
                                                   std::uint64_t seed, const Execution& exec = {}) {
    if (samples < 1) {
        throw std::invalid_argument("make_client_shards: N must be >= 1");
    }
    if (!(sigma2 >= 0.0)) {
        throw std::invalid_argument("make_client_shards: sigma2 must be >= 0");
    }
    const auto count = static_cast<std::size_t>(gt.clients());
    std::vector<ClientShard> shards(count);
    const double noise_std = std::sqrt(sigma2);
    parallel_for(count, exec, [&](std::size_t i) {
        CounterRng rng(make_stream(seed, StreamPurpose::kClientData, i));
        ClientShard shard;
        shard.index = i;
        shard.sigma2 = sigma2;
        shard.x.resize(samples, gt.d());
        for (Index row = 0; row < samples; ++row) {
            for (Index col = 0; col < gt.d(); ++col) {
                shard.x(row, col) = rng.normal();
            }
        }
        Vector noise(samples);
        for (Index row = 0; row < samples; ++row) {
            noise(row) = noise_std * rng.normal();
        }
        shard.y = shard.x * gt.phi.col(static_cast<Index>(i)) + noise;
        shards[i] = std::move(shard);
    });
    return shards;
}

// ---------------------------------------------------------------------------
// Classification corpus
// ---------------------------------------------------------------------------

struct ClassShard {
    std::size_t index = 0;
    Matrix features;          // n x dim
    std::vector<int> labels;  // each in class_set
    std::vector<int> class_set;
    Vector indicator;  // length m, 1 on class_set

    Index samples() const { return features.rows(); }
};

struct ClassificationSpec {
    Index classes = 6;           // m
    Index classes_per_client = 2;  // m'
    Index clients = 12;
    Index samples_per_class = 20;
    Index dim = 8;
    double separation = 4.0;
};

/// Gaussian blobs around class means on a sphere of radius `separation`.
/// Client i owns classes perm[(i m' + j) mod m], j < m', for a seeded
/// permutation perm, so every class is owned when m' M >= m.
inline std::vector<ClassShard> make_classification_tasks(const ClassificationSpec& spec, std::uint64_t seed,
                                                         const Execution& exec = {}) {
    const Index m = spec.classes;
    const Index mp = spec.classes_per_client;
    if (m < 1 || mp < 1 || mp > m) {
        throw std::invalid_argument("make_classification_tasks: need 1 <= m' <= m");
    }
    if (spec.dim < 1 || spec.clients < 1 || spec.samples_per_class < 1) {
        throw std::invalid_argument("make_classification_tasks: dim, M and n_per_class must be >= 1");
    }
    if (mp * spec.clients < m) {
        throw std::invalid_argument("make_classification_tasks: infeasible partition (m' * M < m)");
    }
    if (!(spec.separation >= 0.0)) {
        throw std::invalid_argument("make_classification_tasks: separation must be >= 0");
    }

    Matrix means = seeded_gaussian(m, spec.dim, 1.0, make_stream(seed, StreamPurpose::kClassMeans));
    for (Index c = 0; c < m; ++c) {
        const double norm = means.row(c).norm();
        means.row(c) *= norm > 0.0 ? spec.separation / norm : 0.0;
    }

    std::vector<int> perm(static_cast<std::size_t>(m));
    for (Index c = 0; c < m; ++c) {
        perm[static_cast<std::size_t>(c)] = static_cast<int>(c);
    }
    {
        CounterRng rng(make_stream(seed, StreamPurpose::kClassAssignment));
        for (std::size_t i = perm.size(); i > 1; --i) {
            std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng.below(i))]);
        }
    }

    const auto count = static_cast<std::size_t>(spec.clients);
    std::vector<ClassShard> shards(count);
    parallel_for(count, exec, [&](std::size_t i) {
        ClassShard shard;
        shard.index = i;
        shard.indicator = Vector::Zero(m);
        for (Index j = 0; j < mp; ++j) {
            const int c = perm[static_cast<std::size_t>((static_cast<Index>(i) * mp + j) % m)];
            shard.class_set.push_back(c);
            shard.indicator(c) = 1.0;
        }
        CounterRng rng(make_stream(seed, StreamPurpose::kClassSamples, i));
        shard.features.resize(mp * spec.samples_per_class, spec.dim);
        Index row = 0;
        for (const int c : shard.class_set) {
            for (Index s = 0; s < spec.samples_per_class; ++s, ++row) {
                for (Index f = 0; f < spec.dim; ++f) {
                    shard.features(row, f) = means(c, f) + rng.normal();
                }
                shard.labels.push_back(c);
            }
        }
        shards[i] = std::move(shard);
    });
    return shards;
}

// ---------------------------------------------------------------------------
// Shard table: header `client,row,x1,...,xd,y`, one line per sample,
// numbers in shortest round-trip form with up to 17 significant digits.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
    return std::string(buf, res.ptr);
}

}  // namespace detail

inline void write_shards_csv(std::ostream& out, const std::vector<ClientShard>& shards) {
    if (shards.empty()) {
        return;
    }
    const Index d = shards.front().x.cols();
    out << "client,row";
    for (Index j = 1; j <= d; ++j) {
        out << ",x" << j;
    }
    out << ",y\n";
    for (const auto& shard : shards) {
        for (Index r = 0; r < shard.samples(); ++r) {
            out << shard.index << ',' << r;
            for (Index j = 0; j < d; ++j) {
                out << ',' << detail::format_double(shard.x(r, j));
            }
            out << ',' << detail::format_double(shard.y(r)) << '\n';
        }
    }
}

/// Inverse of write_shards_csv. Noise variance is not stored and comes
/// back as NaN.
inline std::vector<ClientShard> read_shards_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) {
        return {};
    }
    const auto columns = static_cast<Index>(std::count(line.begin(), line.end(), ',') + 1);
    const Index d = columns - 3;
    if (d < 1 || line.rfind("client,row,", 0) != 0) {
        throw std::runtime_error("read_shards_csv: bad header");
    }
    std::vector<std::vector<std::vector<double>>> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        std::vector<double> values;
        std::size_t start = 0;
        while (start <= line.size()) {
            const auto end = std::min(line.find(',', start), line.size());
            double v = 0.0;
            const auto res = std::from_chars(line.data() + start, line.data() + end, v);
            if (res.ec != std::errc{} || res.ptr != line.data() + end) {
                throw std::runtime_error("read_shards_csv: bad number on line " + std::to_string(line_no));
            }
            values.push_back(v);
            start = end + 1;
        }
        if (static_cast<Index>(values.size()) != columns) {
            throw std::runtime_error("read_shards_csv: wrong column count on line " + std::to_string(line_no));
        }
        const auto client = static_cast<std::size_t>(values[0]);
        if (rows.size() <= client) {
            rows.resize(client + 1);
        }
        rows[client].push_back(std::move(values));
    }
    std::vector<ClientShard> shards(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        auto& shard = shards[i];
        shard.index = i;
        shard.sigma2 = std::numeric_limits<double>::quiet_NaN();
        const auto n = static_cast<Index>(rows[i].size());
        shard.x.resize(n, d);
        shard.y.resize(n);
        for (Index r = 0; r < n; ++r) {
            const auto& vals = rows[i][static_cast<std::size_t>(r)];
            for (Index j = 0; j < d; ++j) {
                shard.x(r, j) = vals[static_cast<std::size_t>(2 + j)];
            }
            shard.y(r) = vals.back();
        }
    }
    return shards;
}

}  // namespace flute
