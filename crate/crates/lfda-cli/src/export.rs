//! Plot-ready CSV export of fitted model components.

use std::path::Path;

use lfda_core::error::Result;
use lfda_core::model::FittedModel;
use lfda_core::registry::ScoreComponent;

fn write_csv<F>(path: &Path, header: &[&str], body: F) -> Result<()>
where
    F: FnOnce(&mut csv::Writer<std::fs::File>) -> Result<()>,
{
    let file = std::fs::File::create(path)?;
    let mut writer = csv::Writer::from_writer(file);
    writer.write_record(header)?;
    body(&mut writer)?;
    writer.flush()?;
    Ok(())
}

/// Write the component CSVs into `dir` with the given filename prefix and
/// return the list of files written. Components are indexed 1-based.
///
/// Files: mean surface on the grid, marginal eigenfunctions and eigenvalues,
/// per-component eigenstructure (`psi`/`eta` for the nonparametric model,
/// `rem` parameters otherwise), and predicted score trajectories for every
/// subject on the time grid.
pub fn write_component_csvs(
    model: &FittedModel,
    dir: &Path,
    prefix: &str,
) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut record = |name: &str| -> std::path::PathBuf {
        let path = dir.join(format!("{prefix}{name}"));
        files.push(path.display().to_string());
        path
    };

    let s_points = model.grid().points().to_vec();
    let time_grid: Vec<f64> = {
        let len = model.options.time_grid_len.max(2);
        (0..len).map(|i| i as f64 / (len - 1) as f64).collect()
    };

    let path = record("mean.csv");
    write_csv(&path, &["s", "t", "mu"], |w| {
        for &s in &s_points {
            for &t in &time_grid {
                let mu = model.mean.evaluate(s, t)?;
                w.write_record([s.to_string(), t.to_string(), mu.to_string()])?;
            }
        }
        Ok(())
    })?;

    let path = record("phi.csv");
    write_csv(&path, &["k", "s", "phi"], |w| {
        for (k, phi) in model.basis.phi.iter().enumerate() {
            for (r, &s) in s_points.iter().enumerate() {
                w.write_record([(k + 1).to_string(), s.to_string(), phi[r].to_string()])?;
            }
        }
        Ok(())
    })?;

    let path = record("lambda.csv");
    write_csv(&path, &["k", "lambda"], |w| {
        for (k, lambda) in model.basis.lambda.iter().enumerate() {
            w.write_record([(k + 1).to_string(), lambda.to_string()])?;
        }
        Ok(())
    })?;

    let has_np = model
        .components
        .iter()
        .any(|c| matches!(c, ScoreComponent::Nonparametric(_)));
    if has_np {
        let path = record("psi.csv");
        write_csv(&path, &["k", "l", "t", "psi"], |w| {
            for component in &model.components {
                if let ScoreComponent::Nonparametric(np) = component {
                    for (l, psi) in np.psi.iter().enumerate() {
                        for (g, &t) in np.time_grid.points().iter().enumerate() {
                            w.write_record([
                                (np.k + 1).to_string(),
                                (l + 1).to_string(),
                                t.to_string(),
                                psi[g].to_string(),
                            ])?;
                        }
                    }
                }
            }
            Ok(())
        })?;

        let path = record("eta.csv");
        write_csv(&path, &["k", "l", "eta", "sigma2_e"], |w| {
            for component in &model.components {
                if let ScoreComponent::Nonparametric(np) = component {
                    for (l, eta) in np.eta.iter().enumerate() {
                        w.write_record([
                            (np.k + 1).to_string(),
                            (l + 1).to_string(),
                            eta.to_string(),
                            np.sigma2_e.to_string(),
                        ])?;
                    }
                }
            }
            Ok(())
        })?;
    }

    let has_rem = model
        .components
        .iter()
        .any(|c| matches!(c, ScoreComponent::RandomEffects(_)));
    if has_rem {
        let path = record("rem.csv");
        write_csv(
            &path,
            &["k", "var_b0", "cov_b01", "var_b1", "sigma2_e"],
            |w| {
                for component in &model.components {
                    if let ScoreComponent::RandomEffects(rem) = component {
                        w.write_record([
                            (rem.k + 1).to_string(),
                            rem.sigma_b[0][0].to_string(),
                            rem.sigma_b[0][1].to_string(),
                            rem.sigma_b[1][1].to_string(),
                            rem.sigma2_e.to_string(),
                        ])?;
                    }
                }
                Ok(())
            },
        )?;
    }

    let path = record("xi_hat.csv");
    write_csv(&path, &["subject", "k", "t", "xi_hat"], |w| {
        for subject in model.subjects() {
            for (k, component) in model.components.iter().enumerate() {
                for &t in &time_grid {
                    let xi = component.predict(subject, t)?;
                    w.write_record([
                        subject.to_string(),
                        (k + 1).to_string(),
                        t.to_string(),
                        xi.to_string(),
                    ])?;
                }
            }
        }
        Ok(())
    })?;

    Ok(files)
}
