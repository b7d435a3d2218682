/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_phantom_free: (a: number, b: number) => void;
export const momentum_curve: (a: number, b: number) => [number, number, number, number];
export const phantom_masked_slice: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const phantom_modality_names: () => [number, number];
export const phantom_new: (a: number, b: number) => [number, number, number];
export const phantom_side: (a: number) => number;
export const phantom_slice: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_drop_slice: (a: number, b: number) => void;
export const __wbindgen_start: () => void;
