"""Stage orchestration.

Stages run in a fixed order: tracking (with loop detection after every
keyframe and online mapping), PGBA, post-keyframe insertion plus full BA,
then joint pose and map refinement. Every enabled stage leaves a TUM
trajectory and an entry in report.json; a stage that fails is recorded under
`failures` and the later stages are skipped.
"""
import logging
from pathlib import Path

import numpy as np
import torch

from Deskslam.exceptions import DeskslamError, DivergenceError, InitializationError, StorageError
from factor_graph.problems import full_bundle_adjustment
from geom.io import write_tum
from gsmap.coverage import coverage_analysis
from gsmap.io import save_ply, write_ppm
from gsmap.losses import apply_exposure
from gsmap.mapping import Mapper, deform_map, joint_refine, keyframe_targets
from gsmap.render import render
from loops.detection import detect_loops, loop_edges
from loops.pgba import close_loops, pgba
from metrics.evaluation import ate, depth_metrics, psnr, umeyama
from metrics.report import empty_report, stage_entry, write_report
from simworld.dataset import build_frontend
from solver.models import DampingConfig
from tracker.tracking import Tracker, insert_keyframe

logger = logging.getLogger(__name__)


def exit_code(report):
    """0 on success, otherwise the code of the first recorded failure."""
    for failure in report['failures']:
        return failure['exit_code']
    return 0


class Pipeline:

    def __init__(self, cfg):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.report = empty_report(cfg.seed)
        self.damping = DampingConfig()
        self.frontend = build_frontend(cfg.scene_kind, cfg.trajectory_kind, cfg.n_keyframes, cfg.K, cfg.noise,
                                       cfg.seed, cfg.graph_stride)
        live = self.out / 'live_traj.txt' if cfg.dump_traj else None
        self.tracker = Tracker(self.frontend, cfg.tracker, self.damping, dump_traj=live)
        self.mapper = Mapper(self.frontend.K_full, cfg.map, cfg.weights, cfg.seed) if cfg.enabled('refine') else None
        self.candidates = []
        self.inserted = None
        self.report['loops'] = {'candidates': [], 'n_loop_edges': 0, 'pgba_runs': []}

    @property
    def graph(self):
        return self.tracker.graph

    def _gt(self):
        return dict(enumerate(self.frontend.trajectory.gt))

    def _fail(self, stage, exc):
        logger.error("%s failed: %s", stage, exc)
        self.report['failures'].append({
            'stage': stage,
            'error': type(exc).__name__,
            'message': str(exc),
            'exit_code': exc.exit_code,
        })

    def _record(self, stage, solver=None):
        graph = self.graph
        est = dict(zip(graph.ids, graph.poses()))
        entry = stage_entry(ate(est, self._gt(), 'sim3'), ate(est, self._gt(), 'se3'), solver, len(graph))
        self.report['stages'][stage] = entry
        write_tum(self.out / f'traj_{stage}.txt', graph.ids, graph.poses())
        logger.info("%s: %d keyframes, ATE %.5f m (sim3) %.5f m (se3)", stage, len(graph),
                    entry['ate_sim3'], entry['ate_se3'])

    def _poses(self):
        return {kf.id: kf.pose for kf in self.graph.keyframes}

    def _deform(self, before):
        """Carry the map along with keyframe poses that moved since `before`."""
        if self.mapper is None or not before:
            return
        updates = {kf.id: (before.get(kf.id, kf.pose), kf.pose, 1.0) for kf in self.graph.keyframes}
        deform_map(self.mapper.gmap, updates, self.cfg.map.literal_scale_update)

    def _apply_pgba(self, result):
        if self.mapper is not None:
            deform_map(self.mapper.gmap, result.updates, self.cfg.map.literal_scale_update)
        self.report['loops']['pgba_runs'].append({
            'n_rel_factors': result.n_rel_factors,
            'n_loop_edges': result.n_loop_edges,
            'dropped': len(result.dropped),
            'aligned_first': result.init_report is not None,
            'solver': result.report.as_dict(),
        })
        if result.diverged:
            raise DivergenceError("PGBA diverged")

    # stages

    def _loops_for(self, k):
        graph = self.graph
        if self.cfg.online_loops and self.cfg.enabled('pgba'):
            candidates, result = close_loops(graph, self.frontend, k, self.cfg.thresholds, self.cfg.pgba_iters,
                                             self.damping)
            if result is not None:
                self._apply_pgba(result)
        else:
            history = [kf for kf in graph.keyframes if kf.id < k]
            candidates = detect_loops(graph.keyframe(k), history, self.frontend.mean_flow, self.cfg.thresholds)
            known = {e.key for e in graph.loop_edges()}
            for edge in loop_edges(self.frontend, candidates):
                if edge.key not in known:
                    graph.add_edge(edge)
        self.candidates.extend(candidates)

    def track(self):
        mapped = set()
        diverged = False
        for k in range(len(self.frontend)):
            was_initialized = self.tracker.initialized
            before = self._poses() if was_initialized else {}
            if not self.tracker.observe(k) or not self.tracker.initialized:
                continue
            if self.tracker.reports[-1].diverged and not diverged:
                diverged = True
                self._fail('tracking', DivergenceError(f"window solve diverged at keyframe {k}"))
            self._deform(before)
            if was_initialized:
                self._loops_for(k)
            if self.mapper is not None:
                recent = [self.graph.keyframe(i) for i in self.graph.window_ids()]
                for kf in self.graph.keyframes:
                    if kf.id not in mapped:
                        self.mapper.add_keyframe(kf, recent)
                        mapped.add(kf.id)
        if not self.tracker.initialized:
            raise InitializationError(f"only {len(self.tracker.buffer)} keyframes selected; "
                                      f"{self.cfg.tracker.n_init} needed")
        self.report['loops']['candidates'] = [
            {'i': c.i, 'j': c.j, 'd_of': c.d_of, 'dori': c.dori} for c in self.candidates]
        self.report['loops']['n_loop_edges'] = len(self.graph.loop_edges())
        steps = self.tracker.reports
        self._record('tracking', {
            'steps': len(steps),
            'diverged_steps': sum(r.diverged for r in steps),
            'ba_iterations': sum(r.iterations for s in steps for r in s.ba),
            'jdsa_iterations': sum(r.iterations for s in steps for r in s.jdsa),
        })

    def loop_closing(self):
        if not self.graph.loop_edges():
            logger.info("pgba: no loop edges; trajectory unchanged")
            self._record('pgba')
            return
        result = pgba(self.graph, max_iters=self.cfg.pgba_iters, damping=self.damping)
        self.report['loops']['n_loop_edges'] = result.n_loop_edges
        self._apply_pgba(result)
        self._record('pgba', result.report.as_dict())

    def insert_keyframes(self):
        """Post-keyframe insertion, run once before the first offline stage."""
        if self.inserted is not None:
            return
        self.inserted = []
        for request in coverage_analysis(list(self.graph.keyframes), self.frontend.K):
            kf, _ = insert_keyframe(self.graph, self.frontend, request.kf_id, request.neighbour_id,
                                    self.cfg.tracker, self.damping)
            self.inserted.append({'id': kf.id, 'between': [request.kf_id, request.neighbour_id],
                                  'outside_fraction': request.outside_fraction})
            if self.mapper is not None:
                self.mapper.add_keyframe(kf)

    def full_ba(self):
        self.insert_keyframes()
        before = self._poses()
        report = full_bundle_adjustment(self.graph, self.cfg.full_ba_iters, self.damping)
        self._deform(before)
        if report.diverged:
            raise DivergenceError("full BA diverged")
        self._record('full_ba', report.as_dict())

    def refine(self):
        self.insert_keyframes()
        gmap = self.mapper.gmap
        result = joint_refine(gmap, self.graph.keyframes, self.cfg.refine_iters, self.cfg.weights,
                              self.mapper.K_map)
        losses = result.losses
        self._record('refine', {
            'iterations': len(losses),
            'initial_loss': losses[0] if losses else None,
            'final_loss': losses[-1] if losses else None,
        })

    # outputs

    def _depth_block(self):
        graph = self.graph
        centers = np.array([kf.pose.center() for kf in graph.keyframes])
        gt = self._gt()
        gt_centers = np.array([gt[i].center() for i in graph.ids])
        g = umeyama(centers, gt_centers).scale if len(graph) >= 3 else 1.0
        truth = np.stack([self.frontend.gt(i).depth for i in graph.ids])
        single = [kf.prior_depth * np.median(kf.depth / kf.prior_depth) for kf in graph.keyframes]
        estimates = {
            'prior_single': np.stack(single),
            'prior_grid': np.stack([kf.aligned_prior_depth() for kf in graph.keyframes]),
            'jdsa' if self.cfg.tracker.jdsa else 'ba': np.stack([kf.depth for kf in graph.keyframes]),
        }
        for source, depth in estimates.items():
            self.report['depth'][source] = depth_metrics(g * depth, truth).as_dict()
        return g

    def _map_outputs(self, g):
        gmap, K_map = self.mapper.gmap, self.mapper.K_map
        save_ply(self.out / 'map.ply', gmap)
        scores, rendered, truth = [], [], []
        for kf in self.graph.keyframes:
            with torch.no_grad():
                out = render(gmap, kf.pose, K_map, tile_size=self.cfg.map.tile_size).numpy()
            color = np.clip(apply_exposure(out['color'], kf.exposure), 0.0, 1.0)
            target = keyframe_targets(kf, K_map, self.cfg.map.stride, self.cfg.map.graph_stride)
            scores.append(psnr(color, target.color.numpy()))
            write_ppm(self.out / 'render' / f'kf_{kf.id:04d}.ppm', color)
            stride = self.cfg.map.stride
            rendered.append(g * out['depth'])
            truth.append(self.frontend.full(kf.id).depth[::stride, ::stride][:K_map.height, :K_map.width])
        self.report['psnr'] = {'mean': float(np.mean(scores)), 'per_keyframe': scores}
        self.report['depth']['rendered'] = depth_metrics(np.stack(rendered), np.stack(truth)).as_dict()
        self.report['map'] = {
            'n_gaussians': len(gmap),
            'size_history': list(self.mapper.size_history),
            'inserted': self.inserted or [],
        }

    def evaluate(self):
        write_tum(self.out / 'gt_traj.txt', self.graph.ids, [self._gt()[i] for i in self.graph.ids])
        g = self._depth_block()
        if self.mapper is not None and self.report['stages']['refine'] is not None:
            self._map_outputs(g)

    def run(self):
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StorageError(f"cannot create output directory {self.out}: {exc}") from exc
        torch.manual_seed(self.cfg.seed)
        logger.info("run: seed %d, stages %s, %d frames", self.cfg.seed, ','.join(self.cfg.stages), len(self.frontend))
        try:
            self.track()
        except DeskslamError as exc:
            self._fail('tracking', exc)
        else:
            for stage, step in (('pgba', self.loop_closing), ('full_ba', self.full_ba), ('refine', self.refine)):
                if not self.cfg.enabled(stage):
                    continue
                try:
                    step()
                except DeskslamError as exc:
                    self._fail(stage, exc)
                    break
            try:
                self.evaluate()
            except DeskslamError as exc:
                self._fail('evaluate', exc)
        write_report(self.out / 'report.json', self.report)
        return self.report


def run_pipeline(cfg):
    """Run every enabled stage of `cfg` and return the report written to report.json."""
    return Pipeline(cfg).run()
