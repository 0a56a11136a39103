/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_poddemo_free: (a: number, b: number) => void;
export const __wbg_snapshot_free: (a: number, b: number) => void;
export const poddemo_cumulative_variance: (a: number) => [number, number];
export const poddemo_modes: (a: number) => number;
export const poddemo_n: (a: number) => number;
export const poddemo_n_test: (a: number) => number;
export const poddemo_new: (a: number, b: number, c: number, d: number) => [number, number, number];
export const poddemo_reconstruct: (a: number, b: number, c: number) => [number, number, number, number];
export const poddemo_reliability: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
export const poddemo_truth: (a: number, b: number) => [number, number, number, number];
export const simulate: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number];
export const snapshot_hr: (a: number) => [number, number];
export const snapshot_lr: (a: number) => [number, number];
export const snapshot_lr_n: (a: number) => number;
export const snapshot_n: (a: number) => number;
export const snapshot_upsampled: (a: number) => [number, number];
export const snapshot_upsampling_rmse: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_start: () => void;
