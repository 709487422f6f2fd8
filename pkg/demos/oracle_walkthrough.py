"""Walk through the pipeline on a small synthetic world.

Generates a world with a known concentration kernel, trains a ResCNN,
then compares learned marginal damages with the analytic ones and runs a
curtailment sweep. Takes about a minute on one core.

    python demos/oracle_walkthrough.py
"""
import numpy as np

from cobenefit import grid, health, rescnn, synthetic, training
from cobenefit.grid import EMISSION_CHANNELS

H = 6
EF = 2.5  # tCO2 per tce, one factor for every sector


def main(seed=0):
    kernel = synthetic.OracleKernel(support_cells=H)
    world = synthetic.generate_world(seed, size=(40, 40), n_stations=400, kernel=kernel)
    weights = grid.compute_station_weights(world.stations, world.city_population)
    split = grid.split_dataset(world.station_ids(), seed)
    train, val, test = (training.build_dataset(world, ids, H, weights)
                        for ids in (split.train, split.val, split.test))

    hyper = rescnn.HyperParams(half_extent=H, batch_size=50, iterations=150, dropout=True, dropout_rate=0.5,
                               augmentation=True, aug_variance=0.1, conv_kernel=3, fc_layers=2)
    model = rescnn.build_model(hyper, seed=seed)
    training.train(model, train, hyper, seed=seed, report_every=50)
    for data, tag in ((train, "train"), (val, "val"), (test, "test")):
        rep = training.evaluate(model, data, tag)
        print(f"{tag:5s}  R2={rep.r2:.3f}  rho={rep.rho:.3f}  MFB={rep.mfb:+.3f}")

    demo = health.station_demography(world, world.stations, health.ILLUSTRATIVE_MORTALITY)
    value = health.vsl(health.VslConfig(8.7e6, 56762.7, 8016.4))
    c0 = np.array([synthetic.oracle_concentration(world, s, kernel) for s in world.stations])
    print("\nsector  mean MD learned  mean MD oracle  corr")
    for ch in EMISSION_CHANNELS:
        grads = np.stack([synthetic.oracle_gradient_window(world, s, H, kernel)[int(ch)] for s in world.stations])
        exact = health.field_from_contributions(
            health.damage_contributions(world, world.stations, ch, H, c0, grads, demo, health.GEMM_NCD_LRI, value),
            world, EF)
        learned = health.marginal_damage_field(model, world, world.stations, ch, demo, health.GEMM_NCD_LRI, value, EF)
        cov = exact.covered
        r = np.corrcoef(exact.md[cov], learned.md[cov])[0, 1]
        print(f"{ch.name:6s}  {learned.md[cov].mean():15.2f}  {exact.md[cov].mean():14.2f}  {r:.2f}")

    print("\nIDC curtailment: p, avoided deaths (95% CI)")
    for row in health.curtailment_sweep(model, world, world.stations, "IDC", demo, health.GEMM_NCD_LRI, weights):
        print(f"  {row.p:.2f}  {row.avoided_deaths:9.1f}  ({row.ci_low:.1f}, {row.ci_high:.1f})")


if __name__ == "__main__":
    main()
