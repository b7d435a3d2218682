/* tslint:disable */
/* eslint-disable */

/**
 * One preprocessed synthetic session, cropped to a `SIDE`³ cube.
 */
export class Phantom {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * RGBA slice with the voxels hidden by a random pre-training mask shaded.
     */
    masked_slice(modality: number, z: number, ratio: number, seed: number): Uint8Array;
    static modality_names(): string[];
    constructor(seed: number, lesions: boolean);
    side(): number;
    /**
     * RGBA slice with lesion voxels optionally drawn in red.
     */
    slice(modality: number, z: number, show_lesion: boolean): Uint8Array;
}

export function momentum_curve(total_steps: number, points: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_phantom_free: (a: number, b: number) => void;
    readonly momentum_curve: (a: number, b: number) => [number, number, number, number];
    readonly phantom_masked_slice: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly phantom_modality_names: () => [number, number];
    readonly phantom_new: (a: number, b: number) => [number, number, number];
    readonly phantom_side: (a: number) => number;
    readonly phantom_slice: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_drop_slice: (a: number, b: number) => void;
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
