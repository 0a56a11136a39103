/* tslint:disable */
/* eslint-disable */

/**
 * POD fitted on a small generated dataset, with its held-out snapshots.
 */
export class PodDemo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Cumulative explained-variance fraction per mode.
     */
    cumulative_variance(): Float64Array;
    constructor(seed: number, n_traj: number, n: number, max_modes: number);
    /**
     * Rank-`k` reconstruction of held-out snapshot `case`.
     */
    reconstruct(_case: number, k: number): Float64Array;
    /**
     * Empirical coverage at `levels` for an ensemble of `members` fields
     * built from the projection of the upsampled input plus independent
     * Gaussian coefficients scaled by `spread` × the training residual std.
     * The last entry of the result is the mean CRPS.
     */
    reliability(_case: number, k: number, spread: number, members: number, seed: number, levels: Float64Array): Float64Array;
    truth(_case: number): Float64Array;
    readonly modes: number;
    readonly n: number;
    readonly n_test: number;
}

export class Snapshot {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    hr(): Float64Array;
    lr(): Float64Array;
    upsampled(): Float64Array;
    readonly lr_n: number;
    readonly n: number;
    /**
     * RMSE of the bicubic upsampling against the fine field.
     */
    readonly upsampling_rmse: number;
}

/**
 * Random smooth initial condition propagated `step` steps of `dt = 0.005`.
 */
export function simulate(seed: number, n: number, vx: number, vy: number, log10_kappa: number, step: number, envelope: number): Snapshot;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_poddemo_free: (a: number, b: number) => void;
    readonly __wbg_snapshot_free: (a: number, b: number) => void;
    readonly poddemo_cumulative_variance: (a: number) => [number, number];
    readonly poddemo_modes: (a: number) => number;
    readonly poddemo_n: (a: number) => number;
    readonly poddemo_n_test: (a: number) => number;
    readonly poddemo_new: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly poddemo_reconstruct: (a: number, b: number, c: number) => [number, number, number, number];
    readonly poddemo_reliability: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
    readonly poddemo_truth: (a: number, b: number) => [number, number, number, number];
    readonly simulate: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number];
    readonly snapshot_hr: (a: number) => [number, number];
    readonly snapshot_lr: (a: number) => [number, number];
    readonly snapshot_lr_n: (a: number) => number;
    readonly snapshot_n: (a: number) => number;
    readonly snapshot_upsampled: (a: number) => [number, number];
    readonly snapshot_upsampling_rmse: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
