/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_curves_free: (a: number, b: number) => void;
export const caputo_curves: (a: number, b: number) => [number, number, number];
export const curves_caputo: (a: number) => [number, number];
export const curves_grid_rmse: (a: number) => number;
export const curves_interpolated: (a: number) => [number, number];
export const curves_xs: (a: number) => [number, number];
export const frequency_response: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const half_width_for: (a: number) => number;
export const kernel: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
