#pragma once

// Covariate residualization: per-voxel (or scalar) OLS fitted on healthy
// controls, prediction subtracted from every subject.
//
//   value = b0 + b1*age + b2*sex + b3*tiv + b4*fs + residual

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "container.hpp"
#include "errors.hpp"
#include "phantom.hpp"
#include "volume.hpp"

namespace relevis {

inline const std::vector<std::string> &default_covariates() {
    static const std::vector<std::string> names{"age", "sex", "tiv", "field_strength"};
    return names;
}

inline double covariate_value(const SubjectRecord &r, const std::string &name) {
    if (name == "age") return r.age;
    if (name == "sex") return static_cast<double>(r.sex);
    if (name == "tiv") return r.tiv;
    if (name == "field_strength") return r.field_strength_code();
    throw ConfigError("unknown covariate '" + name + "'");
}

/// Least-squares solver for a fixed design, reusable across many responses.
/// Columns are centred and scaled internally; coefficients come back in raw units.
class OlsDesign {
public:
    /// `columns[c][j]` is covariate c of subject j; an intercept is added.
    OlsDesign(const std::vector<std::string> &names, const std::vector<std::vector<double>> &columns)
        : p_(columns.size() + 1) {
        n_ = columns.empty() ? 0 : columns.front().size();
        for (const auto &c : columns)
            if (c.size() != n_) throw DataError("covariate columns differ in length");
        if (n_ < p_)
            throw SingularDesignError("need at least " + std::to_string(p_) + " subjects for " + std::to_string(p_) +
                                      " coefficients, got " + std::to_string(n_));

        mean_.assign(p_, 0.0);
        scale_.assign(p_, 1.0);
        std::vector<std::string> offending;
        for (std::size_t c = 1; c < p_; ++c) {
            const auto &col = columns[c - 1];
            double m = 0.0;
            for (double v : col) m += v;
            m /= static_cast<double>(n_);
            double ss = 0.0;
            for (double v : col) ss += (v - m) * (v - m);
            mean_[c] = m;
            scale_[c] = std::sqrt(ss / static_cast<double>(n_));
            if (!(scale_[c] > 0.0)) offending.push_back(names[c - 1] + " (constant, collinear with intercept)");
        }
        if (!offending.empty()) throw SingularDesignError("rank-deficient design: " + join(offending));

        // Standardized design Z (n x p), row-major.
        std::vector<double> z(n_ * p_);
        for (std::size_t j = 0; j < n_; ++j) {
            z[j * p_] = 1.0;
            for (std::size_t c = 1; c < p_; ++c) z[j * p_ + c] = (columns[c - 1][j] - mean_[c]) / scale_[c];
        }

        // Gram matrix and its Cholesky factor; a vanishing pivot flags a column
        // that is a linear combination of the ones before it.
        std::vector<double> g(p_ * p_, 0.0);
        for (std::size_t j = 0; j < n_; ++j)
            for (std::size_t a = 0; a < p_; ++a)
                for (std::size_t b = 0; b < p_; ++b) g[a * p_ + b] += z[j * p_ + a] * z[j * p_ + b];
        std::vector<double> l(p_ * p_, 0.0);
        for (std::size_t a = 0; a < p_; ++a) {
            for (std::size_t b = 0; b <= a; ++b) {
                double s = g[a * p_ + b];
                for (std::size_t k = 0; k < b; ++k) s -= l[a * p_ + k] * l[b * p_ + k];
                if (a == b) {
                    if (s <= 1e-10 * g[a * p_ + a]) {
                        offending.push_back(column_name(names, a) + " (collinear with earlier columns)");
                        s = 1.0; // keep factoring so every offender is reported
                    }
                    l[a * p_ + a] = std::sqrt(s);
                } else {
                    l[a * p_ + b] = s / l[b * p_ + b];
                }
            }
        }
        if (!offending.empty()) throw SingularDesignError("rank-deficient design: " + join(offending));

        // Projection P = G^-1 Z^T, so beta_std = P y.
        projection_.assign(p_ * n_, 0.0);
        std::vector<double> rhs(p_);
        for (std::size_t j = 0; j < n_; ++j) {
            for (std::size_t a = 0; a < p_; ++a) rhs[a] = z[j * p_ + a];
            cholesky_solve(l, rhs);
            for (std::size_t a = 0; a < p_; ++a) projection_[a * n_ + j] = rhs[a];
        }
    }

    std::size_t coefficients() const noexcept { return p_; }
    std::size_t subjects() const noexcept { return n_; }

    /// Raw-unit coefficients (intercept first) for one response vector y[j].
    template <class Get>
    void solve(Get &&y_of, double *beta) const {
        for (std::size_t a = 0; a < p_; ++a) {
            const double *row = &projection_[a * n_];
            double s = 0.0;
            for (std::size_t j = 0; j < n_; ++j) s += row[j] * static_cast<double>(y_of(j));
            beta[a] = s;
        }
        double intercept = beta[0];
        for (std::size_t c = 1; c < p_; ++c) {
            beta[c] /= scale_[c];
            intercept -= beta[c] * mean_[c];
        }
        beta[0] = intercept;
    }

private:
    static std::string column_name(const std::vector<std::string> &names, std::size_t a) {
        return a == 0 ? std::string("intercept") : names[a - 1];
    }
    static std::string join(const std::vector<std::string> &parts) {
        std::string out;
        for (const auto &p : parts) out += (out.empty() ? "" : ", ") + p;
        return out;
    }
    void cholesky_solve(const std::vector<double> &l, std::vector<double> &b) const {
        for (std::size_t a = 0; a < p_; ++a) {
            double s = b[a];
            for (std::size_t k = 0; k < a; ++k) s -= l[a * p_ + k] * b[k];
            b[a] = s / l[a * p_ + a];
        }
        for (std::size_t a = p_; a-- > 0;) {
            double s = b[a];
            for (std::size_t k = a + 1; k < p_; ++k) s -= l[k * p_ + a] * b[k];
            b[a] = s / l[a * p_ + a];
        }
    }

    std::size_t p_ = 0, n_ = 0;
    std::vector<double> mean_, scale_, projection_;
};

/// Fitted covariate model: one coefficient vector per voxel, or a single one in scalar mode.
struct ResidualModel {
    std::vector<std::string> covariate_names = default_covariates();
    std::optional<Dims> dims; // empty in scalar mode
    std::size_t fit_count = 0;
    std::vector<double> betas; // units x (1 + covariates), intercept first

    std::size_t stride() const noexcept { return covariate_names.size() + 1; }
    std::size_t units() const noexcept { return dims ? dims->voxels() : 1; }
    bool scalar() const noexcept { return !dims.has_value(); }

    std::span<const double> coefficients(std::size_t unit) const { return {&betas[unit * stride()], stride()}; }

    double predict(std::size_t unit, std::span<const double> covariates) const {
        const double *b = &betas[unit * stride()];
        double s = b[0];
        for (std::size_t c = 0; c < covariates.size(); ++c) s += b[c + 1] * covariates[c];
        return s;
    }

    std::vector<double> covariates_of(const SubjectRecord &r) const {
        std::vector<double> out;
        out.reserve(covariate_names.size());
        for (const auto &n : covariate_names) out.push_back(covariate_value(r, n));
        return out;
    }
};

namespace residualize_detail {

inline std::vector<std::vector<double>> design_columns(const std::vector<std::string> &names,
                                                       std::span<const SubjectRecord> records) {
    std::vector<std::vector<double>> cols(names.size(), std::vector<double>(records.size()));
    for (std::size_t c = 0; c < names.size(); ++c)
        for (std::size_t j = 0; j < records.size(); ++j) cols[c][j] = covariate_value(records[j], names[c]);
    return cols;
}

} // namespace residualize_detail

/// Fit per-voxel OLS on control subjects. All records must be CN.
inline ResidualModel fit_residualizer(std::span<const Volume3D> volumes, std::span<const SubjectRecord> records,
                                      const std::vector<std::string> &covariates = default_covariates()) {
    if (volumes.size() != records.size()) throw DataError("volume and record counts differ");
    if (volumes.empty()) throw DataError("no control subjects to fit");
    for (const auto &r : records)
        if (r.group != Group::CN) throw DataError("residualizer must be fitted on controls only; " + r.id + " is " +
                                                  to_string(r.group));
    const Dims dims = volumes.front().dims();
    for (const auto &v : volumes) require_same_dims(v.dims(), dims, "control volumes differ in dims");

    const OlsDesign design(covariates, residualize_detail::design_columns(covariates, records));
    ResidualModel m;
    m.covariate_names = covariates;
    m.dims = dims;
    m.fit_count = volumes.size();
    m.betas.assign(dims.voxels() * m.stride(), 0.0);
    const std::size_t stride = m.stride();
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(dims.voxels()); ++i)
        design.solve([&](std::size_t j) { return volumes[j][static_cast<std::size_t>(i)]; }, &m.betas[i * stride]);
    return m;
}

inline ResidualModel fit_residualizer(std::span<const Subject> controls,
                                      const std::vector<std::string> &covariates = default_covariates()) {
    std::vector<Volume3D> vols;
    std::vector<SubjectRecord> recs;
    for (const auto &s : controls) {
        vols.push_back(s.volume);
        recs.push_back(s.record);
    }
    return fit_residualizer(vols, recs, covariates);
}

/// Subtract the covariate prediction voxel by voxel.
inline Volume3D apply_residualizer(const ResidualModel &m, const Volume3D &v, const SubjectRecord &r) {
    if (m.scalar()) throw DimsError("scalar residual model applied to a volume");
    require_same_dims(v.dims(), *m.dims, "volume dims differ from residual model");
    const auto cov = m.covariates_of(r);
    std::vector<float> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i)
        out[i] = static_cast<float>(static_cast<double>(v[i]) - m.predict(i, cov));
    return v.with_data(std::move(out));
}

inline ResidualModel fit_scalar_residualizer(std::span<const double> values, std::span<const SubjectRecord> records,
                                             const std::vector<std::string> &covariates = default_covariates()) {
    if (values.size() != records.size()) throw DataError("value and record counts differ");
    const OlsDesign design(covariates, residualize_detail::design_columns(covariates, records));
    ResidualModel m;
    m.covariate_names = covariates;
    m.fit_count = values.size();
    m.betas.assign(m.stride(), 0.0);
    design.solve([&](std::size_t j) { return values[j]; }, m.betas.data());
    return m;
}

inline double apply_scalar(const ResidualModel &m, double value, const SubjectRecord &r) {
    if (!m.scalar()) throw DimsError("voxel-wise residual model applied to a scalar");
    return value - m.predict(0, m.covariates_of(r));
}

inline const container::Magic kResidualMagic{'R', 'V', 'R', 'E', 'S', 'I', 'D', '1'};

inline void save_residual_model(const ResidualModel &m, const std::filesystem::path &path) {
    nlohmann::json h;
    h["format"] = "relevis-residual-model";
    h["version"] = 1;
    h["covariate_names"] = m.covariate_names;
    h["encoding"] = {{"sex", "F=0,M=1"}, {"field_strength", "1.5T=0,3T=1"}};
    if (m.dims)
        h["dims"] = {m.dims->nx, m.dims->ny, m.dims->nz};
    else
        h["dims"] = "scalar";
    h["fit_count"] = m.fit_count;
    h["payload_floats"] = m.betas.size();
    std::vector<float> payload(m.betas.begin(), m.betas.end());
    container::write(path, kResidualMagic, h, payload);
}

inline ResidualModel load_residual_model(const std::filesystem::path &path) {
    auto blob = container::read(path, kResidualMagic);
    const auto &h = blob.header;
    try {
        if (h.at("version").get<int>() != 1) throw FormatError(path.string() + ": unsupported version");
        if (h.at("encoding").at("sex") != "F=0,M=1" || h.at("encoding").at("field_strength") != "1.5T=0,3T=1")
            throw FormatError(path.string() + ": covariate encoding mismatch");
        ResidualModel m;
        m.covariate_names = h.at("covariate_names").get<std::vector<std::string>>();
        if (h.at("dims").is_array()) {
            const auto d = h.at("dims").get<std::vector<std::size_t>>();
            if (d.size() != 3) throw FormatError(path.string() + ": dims must have 3 entries");
            m.dims = Dims{d[0], d[1], d[2]};
        }
        m.fit_count = h.at("fit_count").get<std::size_t>();
        if (blob.payload.size() != m.units() * m.stride())
            throw FormatError(path.string() + ": payload size does not match dims and covariates");
        m.betas.assign(blob.payload.begin(), blob.payload.end());
        return m;
    } catch (const nlohmann::json::exception &e) {
        throw FormatError(path.string() + ": malformed header (" + e.what() + ")");
    }
}

} // namespace relevis
